//! Model instances built from a [`ModelSpec`] and the sequence forward pass.

use std::ops::Range;

use rand::Rng;

use super::spec::{LayerSpec, ModelSpec};
use crate::autodiff::{softmax_rows, BatchNormConfig, Graph, RunningStats, Var};
use crate::cells::{conv_cell_step, gru_dense_param_shapes, gru_dense_step, CellKind, CellState};
use crate::data::{ImageSequenceBatch, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Clone, Debug)]
enum Step {
    Conv { kind: CellKind, params: Range<usize> },
    MaxPool,
    Dropout(f64),
    BatchNorm { params: Range<usize>, stats: usize },
    Flatten,
    Dense { params: Range<usize> },
    GruDense { params: Range<usize> },
    Head { params: Range<usize> },
}

/// Parameter layout derived from a spec: `(name, shape, fan_in)` per tensor,
/// plus the channel count of every batch-norm layer.
struct Layout {
    steps: Vec<Step>,
    shapes: Vec<(String, Vec<usize>, usize)>,
    bn_channels: Vec<usize>,
}

#[derive(Clone, Copy)]
enum Feature {
    Spatial(usize, usize, usize),
    Flat(usize),
}

fn layout(spec: &ModelSpec) -> Result<Layout> {
    let [c, h, w] = spec.input;
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::Config(format!("input extents {:?} must be positive", spec.input)));
    }
    let mut feat = Feature::Spatial(c, h, w);
    let mut out = Layout {
        steps: Vec::new(),
        shapes: Vec::new(),
        bn_channels: Vec::new(),
    };
    let bad = |i: usize, msg: String| Error::Config(format!("layer {i} of {}: {msg}", spec.name));
    for (i, layer) in spec.layers.iter().enumerate() {
        let start = out.shapes.len();
        let add = |shapes: Vec<(&str, Vec<usize>, usize)>, out: &mut Layout| {
            for (name, shape, fan_in) in shapes {
                out.shapes.push((format!("l{i}.{name}"), shape, fan_in));
            }
            start..out.shapes.len()
        };
        let step = match (layer, feat) {
            (LayerSpec::Conv { cell, channels }, Feature::Spatial(c, h, w)) => {
                if *channels == 0 {
                    return Err(bad(i, "zero channels".into()));
                }
                let params = add(cell.param_shapes(c, *channels), &mut out);
                feat = Feature::Spatial(*channels, h, w);
                Step::Conv { kind: *cell, params }
            }
            (LayerSpec::MaxPool, Feature::Spatial(c, h, w)) => {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(bad(i, format!("cannot pool odd extents {h}x{w}")));
                }
                feat = Feature::Spatial(c, h / 2, w / 2);
                Step::MaxPool
            }
            (LayerSpec::Dropout { rate }, _) => {
                if !(0.0..1.0).contains(rate) {
                    return Err(bad(i, format!("dropout rate {rate} outside [0, 1)")));
                }
                Step::Dropout(*rate)
            }
            (LayerSpec::BatchNorm, f) => {
                let ch = match f {
                    Feature::Spatial(c, _, _) => c,
                    Feature::Flat(n) => n,
                };
                let params = add(vec![("gamma", vec![ch], 0), ("beta", vec![ch], 0)], &mut out);
                out.bn_channels.push(ch);
                Step::BatchNorm {
                    params,
                    stats: out.bn_channels.len() - 1,
                }
            }
            (LayerSpec::Flatten { width }, Feature::Spatial(c, h, w)) => {
                if c * h * w != *width {
                    return Err(bad(
                        i,
                        format!("flatten width {width} does not match the {c}x{h}x{w} feature map"),
                    ));
                }
                feat = Feature::Flat(*width);
                Step::Flatten
            }
            (LayerSpec::Dense { units }, Feature::Flat(n)) => {
                let params = add(vec![("w", vec![*units, n], n), ("b", vec![*units], 1)], &mut out);
                feat = Feature::Flat(*units);
                Step::Dense { params }
            }
            (LayerSpec::GruDense { units }, Feature::Flat(n)) => {
                let params = add(gru_dense_param_shapes(n, *units), &mut out);
                feat = Feature::Flat(*units);
                Step::GruDense { params }
            }
            (LayerSpec::SoftmaxHead { classes }, Feature::Flat(n)) => {
                if *classes != NUM_CLASSES {
                    return Err(bad(i, format!("head must have {NUM_CLASSES} outputs, not {classes}")));
                }
                if i + 1 != spec.layers.len() {
                    return Err(bad(i, "the softmax head must be the last layer".into()));
                }
                let params = add(vec![("w", vec![*classes, n], n), ("b", vec![*classes], 1)], &mut out);
                feat = Feature::Flat(*classes);
                Step::Head { params }
            }
            (l, Feature::Spatial(..)) => return Err(bad(i, format!("{l:?} needs a flattened input"))),
            (l, Feature::Flat(_)) => return Err(bad(i, format!("{l:?} needs a spatial input"))),
        };
        out.steps.push(step);
    }
    if !matches!(out.steps.last(), Some(Step::Head { .. })) {
        return Err(Error::Config(format!("{} does not end in a softmax head", spec.name)));
    }
    Ok(out)
}

/// A built network: parameters, batch-norm running statistics and the
/// execution plan.
#[derive(Clone, Debug)]
pub struct Model<T> {
    spec: ModelSpec,
    steps: Vec<Step>,
    params: Vec<Param<T>>,
    bn_stats: Vec<RunningStats<T>>,
    bn_cfg: BatchNormConfig,
}

/// Value of one layer's recurrent state between per-frame graphs.
type StoredState<T> = Option<(Tensor<T>, Option<Tensor<T>>)>;

/// Loss, parameter gradients and per-frame probabilities of one sequence
/// batch.
#[derive(Clone, Debug)]
pub struct LossAndGrads<T> {
    pub loss: T,
    pub grads: Vec<Tensor<T>>,
    pub probs: Tensor<T>,
}

/// Instantiates `spec`. Kernels and dense weights draw from a uniform
/// distribution with limit `sqrt(3 / fan_in)`; biases and batch-norm shifts
/// start at 0 and batch-norm scales at 1.
pub fn build_model<T: Element, R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Model<T>> {
    let lay = layout(spec)?;
    let params = lay
        .shapes
        .iter()
        .map(|(name, shape, fan_in)| {
            let n: usize = shape.iter().product();
            let data: Vec<T> = if name.ends_with(".gamma") {
                vec![T::one(); n]
            } else if shape.len() == 1 {
                vec![T::zero(); n]
            } else {
                let limit = (3.0 / *fan_in as f64).sqrt();
                (0..n).map(|_| T::of(rng.random_range(-limit..limit))).collect()
            };
            Param {
                name: name.clone(),
                value: Tensor::from_vec(shape.clone(), data).expect("param shape"),
            }
        })
        .collect();
    Ok(Model {
        spec: spec.clone(),
        steps: lay.steps,
        params,
        bn_stats: lay.bn_channels.iter().map(|&c| RunningStats::new(c)).collect(),
        bn_cfg: BatchNormConfig::default(),
    })
}

impl<T: Element> Model<T> {
    /// Rebuilds a model from stored tensors, checking names and shapes
    /// against the spec.
    pub fn from_parts(spec: &ModelSpec, params: Vec<Param<T>>, bn_stats: Vec<RunningStats<T>>) -> Result<Self> {
        let lay = layout(spec)?;
        if params.len() != lay.shapes.len() {
            return Err(Error::CheckpointMismatch(format!(
                "{} parameter tensors stored, spec needs {}",
                params.len(),
                lay.shapes.len()
            )));
        }
        for (p, (name, shape, _)) in params.iter().zip(&lay.shapes) {
            if &p.name != name || p.value.shape() != shape.as_slice() {
                return Err(Error::CheckpointMismatch(format!(
                    "stored tensor {} {:?} where spec expects {name} {shape:?}",
                    p.name,
                    p.value.shape()
                )));
            }
        }
        let stats_ok = bn_stats.len() == lay.bn_channels.len()
            && bn_stats
                .iter()
                .zip(&lay.bn_channels)
                .all(|(s, &c)| s.channels() == c && s.var.len() == c);
        if !stats_ok {
            return Err(Error::CheckpointMismatch("batch-norm statistics do not match the spec".into()));
        }
        Ok(Model {
            spec: spec.clone(),
            steps: lay.steps,
            params,
            bn_stats,
            bn_cfg: BatchNormConfig::default(),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn bn_stats(&self) -> &[RunningStats<T>] {
        &self.bn_stats
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Parameters of convolutional layers only.
    pub fn conv_param_count(&self) -> usize {
        self.steps
            .iter()
            .filter_map(|s| match s {
                Step::Conv { params, .. } => Some(self.params[params.clone()].iter().map(|p| p.value.len()).sum::<usize>()),
                _ => None,
            })
            .sum()
    }

    fn check_batch(&self, batch: &ImageSequenceBatch<T>) -> Result<()> {
        let s = batch.frames.shape();
        if s.len() != 5 || s[2..] != self.spec.input {
            return Err(Error::shape(format!(
                "frames {s:?} do not match model input [batch, t, {:?}]",
                self.spec.input
            )));
        }
        Ok(())
    }

    /// Runs one frame through every layer, threading recurrent state.
    #[allow(clippy::too_many_arguments)]
    fn frame<R: Rng + ?Sized>(
        steps: &[Step],
        bn_stats: &mut [RunningStats<T>],
        bn_cfg: BatchNormConfig,
        g: &mut Graph<T>,
        pv: &[Var],
        x: Var,
        states: &mut [Option<CellState>],
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let mut x = x;
        for (i, step) in steps.iter().enumerate() {
            x = match step {
                Step::Conv { kind, params } => {
                    if kind.is_recurrent() && states[i].is_none() {
                        let mut shape = g.shape(x).to_vec();
                        shape[1] = g.shape(pv[params.start]).first().copied().unwrap_or(0);
                        states[i] = Some(CellState::zeros(g, *kind, &shape));
                    }
                    let (out, next) = conv_cell_step(g, *kind, x, states[i].as_ref(), &pv[params.clone()])?;
                    if next.is_some() {
                        states[i] = next;
                    }
                    out
                }
                Step::MaxPool => g.max_pool_2x2(x)?,
                Step::Dropout(rate) => g.dropout(x, *rate, training, rng)?,
                Step::BatchNorm { params, stats } => {
                    g.batch_norm(x, pv[params.start], pv[params.start + 1], &mut bn_stats[*stats], training, bn_cfg)?
                }
                Step::Flatten => g.flatten(x)?,
                Step::Dense { params } => {
                    let y = g.dense(x, pv[params.start], Some(pv[params.start + 1]))?;
                    g.relu(y)
                }
                Step::GruDense { params } => {
                    let h = match states[i] {
                        Some(s) => s.hidden,
                        None => {
                            let units = g.shape(pv[params.start])[0];
                            let batch = g.shape(x)[0];
                            g.input(Tensor::zeros([batch, units]))
                        }
                    };
                    let h = gru_dense_step(g, x, h, &pv[params.clone()])?;
                    states[i] = Some(CellState { hidden: h, cell: None });
                    h
                }
                Step::Head { params } => g.dense(x, pv[params.start], Some(pv[params.start + 1]))?,
            };
        }
        Ok(x)
    }

    /// Per-frame class probabilities `[batch, t, 10]`. Recurrent state starts
    /// at zero and is carried across frames; stateless layers see each frame
    /// independently. In training mode dropout is active and batch-norm
    /// running statistics are updated.
    pub fn forward_sequence<R: Rng + ?Sized>(
        &mut self,
        batch: &ImageSequenceBatch<T>,
        training: bool,
        rng: &mut R,
    ) -> Result<Tensor<T>> {
        self.check_batch(batch)?;
        let (b, frames) = (batch.batch_size(), batch.frames_per_item());
        let mut stored: Vec<StoredState<T>> = vec![None; self.steps.len()];
        let mut probs = vec![T::zero(); b * frames * NUM_CLASSES];
        for t in 0..frames {
            let mut g = Graph::new();
            let pv: Vec<Var> = self.params.iter().map(|p| g.input(p.value.clone())).collect();
            let mut states: Vec<Option<CellState>> = stored
                .iter()
                .map(|s| {
                    s.as_ref().map(|(h, c)| CellState {
                        hidden: g.input(h.clone()),
                        cell: c.as_ref().map(|c| g.input(c.clone())),
                    })
                })
                .collect();
            let x = g.input(batch.frame(t));
            let logits = Self::frame(&self.steps, &mut self.bn_stats, self.bn_cfg, &mut g, &pv, x, &mut states, training, rng)?;
            let p = softmax_rows(g.value(logits).data(), NUM_CLASSES);
            for (item, row) in p.chunks_exact(NUM_CLASSES).enumerate() {
                probs[(item * frames + t) * NUM_CLASSES..][..NUM_CLASSES].copy_from_slice(row);
            }
            stored = states
                .iter()
                .map(|s| s.map(|s| (g.value(s.hidden).clone(), s.cell.map(|c| g.value(c).clone()))))
                .collect();
        }
        Tensor::from_vec([b, frames, NUM_CLASSES], probs)
    }

    /// Frame-averaged cross-entropy of `batch` (mean over frames and items)
    /// and its gradient with respect to every parameter, in training mode.
    pub fn loss_and_grads<R: Rng + ?Sized>(&mut self, batch: &ImageSequenceBatch<T>, rng: &mut R) -> Result<LossAndGrads<T>> {
        self.check_batch(batch)?;
        let (b, frames) = (batch.batch_size(), batch.frames_per_item());
        let mut g = Graph::new();
        let pv: Vec<Var> = self.params.iter().map(|p| g.param(p.value.clone())).collect();
        let mut states: Vec<Option<CellState>> = vec![None; self.steps.len()];
        let mut losses = Vec::with_capacity(frames);
        let mut probs = vec![T::zero(); b * frames * NUM_CLASSES];
        for t in 0..frames {
            let x = g.input(batch.frame(t));
            let logits = Self::frame(&self.steps, &mut self.bn_stats, self.bn_cfg, &mut g, &pv, x, &mut states, true, rng)?;
            let (p, loss) = g.softmax_cross_entropy(logits, &batch.labels)?;
            for (item, row) in p.data().chunks_exact(NUM_CLASSES).enumerate() {
                probs[(item * frames + t) * NUM_CLASSES..][..NUM_CLASSES].copy_from_slice(row);
            }
            losses.push(loss);
        }
        let loss = g.mean(&losses)?;
        g.backward(loss)?;
        let grads = pv
            .iter()
            .zip(&self.params)
            .map(|(&v, p)| g.grad_tensor(v).unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec())))
            .collect();
        Ok(LossAndGrads {
            loss: g.value(loss).data()[0],
            grads,
            probs: Tensor::from_vec([b, frames, NUM_CLASSES], probs)?,
        })
    }
}
