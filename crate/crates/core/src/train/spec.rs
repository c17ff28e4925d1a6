//! Declarative layer lists for the default architectures and their ablations.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cells::CellKind;
use crate::data::NUM_CLASSES;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "layer", rename_all = "snake_case")]
pub enum LayerSpec {
    /// 3x3 same-padded convolutional layer of the given cell kind.
    Conv { cell: CellKind, channels: usize },
    MaxPool,
    Dropout { rate: f64 },
    /// Applied to every frame individually.
    BatchNorm,
    /// Declares the flattened width the next dense layer expects.
    Flatten { width: usize },
    /// Fully connected + ReLU.
    Dense { units: usize },
    /// Fully connected GRU layer.
    GruDense { units: usize },
    /// Fully connected layer whose outputs go through a softmax.
    SoftmaxHead { classes: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    /// `[channels, height, width]` of one frame.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

/// Channel and unit counts of the default architecture.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Widths {
    pub block1: usize,
    pub block2: usize,
    pub dense: usize,
}

impl Widths {
    pub const FEEDFORWARD: Widths = Widths {
        block1: 96,
        block2: 192,
        dense: 1536,
    };
    pub const RECURRENT: Widths = Widths {
        block1: 32,
        block2: 64,
        dense: 512,
    };

    /// Multiplies every count by `scale` (rounded, at least 1).
    pub fn scaled(self, scale: f64) -> Widths {
        let s = |v: usize| ((v as f64 * scale).round() as usize).max(1);
        Widths {
            block1: s(self.block1),
            block2: s(self.block2),
            dense: s(self.dense),
        }
    }
}

/// Where the recurrent cells go in the default four-conv-layer stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Placement {
    pub block1: Option<CellKind>,
    pub block2: Option<CellKind>,
    pub recurrent_dense: bool,
}

pub const BUILTIN_NAMES: [&str; 9] = [
    "ccnn",
    "grucnn",
    "lstmcnn",
    "elmancnn",
    "rgcnn",
    "ccnn-grufc",
    "grucnn-grufc",
    "grucnn-late",
    "grucnn-early",
];

impl ModelSpec {
    /// The thirteen-row default stack with cells and widths chosen by the
    /// caller.
    pub fn default_stack(name: &str, image_size: usize, placement: Placement, scale: f64) -> ModelSpec {
        let ff = Widths::FEEDFORWARD.scaled(scale);
        let rec = Widths::RECURRENT.scaled(scale);
        let any_conv_rec = placement.block1.is_some() || placement.block2.is_some();
        let conv = |cell: Option<CellKind>, ff_width: usize, rec_width: usize| match cell {
            Some(cell) => LayerSpec::Conv {
                cell,
                channels: rec_width,
            },
            None => LayerSpec::Conv {
                cell: CellKind::FeedforwardConv,
                channels: ff_width,
            },
        };
        let c2 = if placement.block2.is_some() { rec.block2 } else { ff.block2 };
        let dense_units = if any_conv_rec { rec.dense } else { ff.dense };
        let quarter = image_size / 4;
        let dense = if placement.recurrent_dense {
            LayerSpec::GruDense { units: dense_units }
        } else {
            LayerSpec::Dense { units: dense_units }
        };
        ModelSpec {
            name: name.to_string(),
            input: [3, image_size, image_size],
            layers: vec![
                conv(placement.block1, ff.block1, rec.block1),
                conv(placement.block1, ff.block1, rec.block1),
                LayerSpec::MaxPool,
                LayerSpec::Dropout { rate: 0.25 },
                LayerSpec::BatchNorm,
                conv(placement.block2, ff.block2, rec.block2),
                conv(placement.block2, ff.block2, rec.block2),
                LayerSpec::MaxPool,
                LayerSpec::Dropout { rate: 0.25 },
                LayerSpec::Flatten {
                    width: c2 * quarter * quarter,
                },
                dense,
                LayerSpec::Dropout { rate: 0.5 },
                LayerSpec::SoftmaxHead { classes: NUM_CLASSES },
            ],
        }
    }

    /// "No recurrency" column of the default architecture.
    pub fn default_feedforward(image_size: usize) -> ModelSpec {
        Self::builtin("ccnn", image_size, 1.0).expect("builtin")
    }

    /// "Recurrency" column of the default architecture.
    pub fn default_recurrent(image_size: usize) -> ModelSpec {
        Self::builtin("grucnn", image_size, 1.0).expect("builtin")
    }

    /// Named architectures: the two default columns, the alternative cells,
    /// the recurrent fully connected ablations and the partial placements.
    pub fn builtin(name: &str, image_size: usize, scale: f64) -> Result<ModelSpec> {
        use CellKind::*;
        let all = |k| Placement {
            block1: Some(k),
            block2: Some(k),
            recurrent_dense: false,
        };
        let placement = match name {
            "ccnn" => Placement {
                block1: None,
                block2: None,
                recurrent_dense: false,
            },
            "grucnn" => all(GruConv),
            "lstmcnn" => all(LstmConv),
            "elmancnn" => all(ElmanConv),
            "rgcnn" => all(RgConv),
            "ccnn-grufc" => Placement {
                block1: None,
                block2: None,
                recurrent_dense: true,
            },
            "grucnn-grufc" => Placement {
                recurrent_dense: true,
                ..all(GruConv)
            },
            "grucnn-late" => Placement {
                block1: None,
                block2: Some(GruConv),
                recurrent_dense: false,
            },
            "grucnn-early" => Placement {
                block1: Some(GruConv),
                block2: None,
                recurrent_dense: false,
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown model {other:?}; expected one of {}",
                    BUILTIN_NAMES.join(", ")
                )))
            }
        };
        if image_size < 4 || image_size % 4 != 0 {
            return Err(Error::Config(format!(
                "image size {image_size} must be a positive multiple of 4"
            )));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!("width scale {scale} must be positive")));
        }
        Ok(Self::default_stack(name, image_size, placement, scale))
    }

    /// Indices of layers that carry state across frames.
    pub fn recurrent_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| match l {
                LayerSpec::Conv { cell, .. } => cell.is_recurrent(),
                LayerSpec::GruDense { .. } => true,
                _ => false,
            })
            .map(|(i, _)| i)
            .collect()
    }

    pub fn is_stateless(&self) -> bool {
        self.recurrent_layers().is_empty()
    }

    /// Conv-layer channel counts in order.
    pub fn conv_widths(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Conv { channels, .. } => Some(*channels),
                _ => None,
            })
            .collect()
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("spec serializes");
        Sha256::digest(&json).into()
    }

    pub fn hash_hex(&self) -> String {
        self.hash().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_columns() {
        let ff = ModelSpec::default_feedforward(32);
        assert_eq!(ff.conv_widths(), vec![96, 96, 192, 192]);
        assert!(ff.layers.contains(&LayerSpec::Dense { units: 1536 }));
        assert!(ff.is_stateless());
        let rec = ModelSpec::default_recurrent(32);
        assert_eq!(rec.conv_widths(), vec![32, 32, 64, 64]);
        assert!(rec.layers.contains(&LayerSpec::Dense { units: 512 }));
        assert_eq!(rec.recurrent_layers(), vec![0, 1, 5, 6]);
        assert_eq!(rec.layers[9], LayerSpec::Flatten { width: 64 * 8 * 8 });
        for name in BUILTIN_NAMES {
            let s = ModelSpec::builtin(name, 16, 0.25).unwrap();
            assert_eq!(s.layers.last(), Some(&LayerSpec::SoftmaxHead { classes: 10 }));
            assert_eq!(s.layers.len(), 13);
        }
        assert!(ModelSpec::builtin("resnet", 16, 1.0).is_err());
        assert!(ModelSpec::builtin("ccnn", 10, 1.0).is_err());
    }

    #[test]
    fn partial_placements() {
        let late = ModelSpec::builtin("grucnn-late", 16, 1.0).unwrap();
        assert_eq!(late.recurrent_layers(), vec![5, 6]);
        assert_eq!(late.conv_widths(), vec![96, 96, 64, 64]);
        let early = ModelSpec::builtin("grucnn-early", 16, 1.0).unwrap();
        assert_eq!(early.recurrent_layers(), vec![0, 1]);
        let fc = ModelSpec::builtin("ccnn-grufc", 16, 1.0).unwrap();
        assert_eq!(fc.recurrent_layers(), vec![10]);
    }

    #[test]
    fn hash_tracks_content() {
        let a = ModelSpec::default_recurrent(16);
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.name.push('x');
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash_hex().len(), 64);
        let json = serde_json::to_string(&a).unwrap();
        assert_eq!(serde_json::from_str::<ModelSpec>(&json).unwrap(), a);
    }
}
