use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::ReportOptions;
use crate::data::SnrLevel;
use crate::error::{Error, Result};
use crate::train::{ModelSpec, SnrSet, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Precision {
    F32,
    F64,
}

impl TryFrom<u8> for Precision {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            32 => Ok(Precision::F32),
            64 => Ok(Precision::F64),
            _ => Err(format!("precision must be 32 or 64, not {v}")),
        }
    }
}

impl From<Precision> for u8 {
    fn from(p: Precision) -> u8 {
        match p {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Toyset {
        per_class: usize,
        test_per_class: usize,
        image_size: usize,
    },
    /// CIFAR-10 binary batches.
    Cifar10 {
        train: Vec<PathBuf>,
        test: PathBuf,
    },
}

impl DatasetConfig {
    pub fn image_size(&self) -> usize {
        match self {
            DatasetConfig::Toyset { image_size, .. } => *image_size,
            DatasetConfig::Cifar10 { .. } => crate::data::cifar::CIFAR_SIZE,
        }
    }
}

/// One trained configuration: a model trained on one SNR set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub model: String,
    pub snr_set: SnrSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TestConfig {
    pub frames: usize,
    pub repetitions: usize,
    pub snr: Vec<SnrLevel>,
    /// Use only the first `items` test images.
    pub items: Option<usize>,
    pub batch_size: usize,
}

impl Default for TestConfig {
    fn default() -> Self {
        TestConfig {
            frames: 51,
            repetitions: 5,
            snr: vec![
                SnrLevel::whole(64),
                SnrLevel::whole(4),
                SnrLevel::whole(1),
                SnrLevel::inverse(4),
                SnrLevel::inverse(16),
            ],
            items: None,
            batch_size: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out: PathBuf,
    /// Base seed for data, initialization, training and test noise.
    pub seed: u64,
    pub precision: Precision,
    /// Multiplier on the default layer widths.
    pub width_scale: f64,
    pub dataset: DatasetConfig,
    pub runs: Vec<RunSpec>,
    pub train: TrainConfig,
    pub test: TestConfig,
    pub report: ReportOptions,
}

impl Default for ExperimentConfig {
    /// The desk-scale grid: cCNN and gruCNN on the default SNR set plus
    /// gruCNN on the low set, 16x16 toyset.
    fn default() -> Self {
        ExperimentConfig {
            out: PathBuf::from("runs/desk"),
            seed: 0,
            precision: Precision::F32,
            width_scale: 0.25,
            dataset: DatasetConfig::Toyset {
                per_class: 200,
                test_per_class: 20,
                image_size: 16,
            },
            runs: vec![
                RunSpec {
                    model: "ccnn".into(),
                    snr_set: SnrSet::DEFAULT,
                },
                RunSpec {
                    model: "grucnn".into(),
                    snr_set: SnrSet::DEFAULT,
                },
                RunSpec {
                    model: "grucnn".into(),
                    snr_set: SnrSet::LOW,
                },
            ],
            train: TrainConfig {
                epochs: 8,
                batch_size: 32,
                seeds: 1,
                ..TrainConfig::default()
            },
            test: TestConfig {
                repetitions: 3,
                ..TestConfig::default()
            },
            report: ReportOptions::default(),
        }
    }
}

/// Command-line overrides applied on top of a config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub precision: Option<Precision>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(p) = &o.out {
            self.out = p.clone();
        }
        if let Some(p) = o.precision {
            self.precision = p;
        }
        self.train.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.runs.is_empty() {
            return Err(Error::Config("no runs configured".into()));
        }
        for r in &self.runs {
            self.model_spec(&r.model)?;
        }
        let t = &self.test;
        if t.frames == 0 || t.repetitions == 0 || t.snr.is_empty() || t.batch_size == 0 {
            return Err(Error::Config("test frames, repetitions, batch size and SNR list must be non-empty".into()));
        }
        if let DatasetConfig::Toyset {
            per_class,
            test_per_class,
            ..
        } = self.dataset
        {
            if per_class == 0 || test_per_class == 0 {
                return Err(Error::Config("toyset needs at least one image per class in each split".into()));
            }
        }
        Ok(())
    }

    pub fn model_spec(&self, name: &str) -> Result<ModelSpec> {
        ModelSpec::builtin(name, self.dataset.image_size(), self.width_scale)
    }

    /// Name of replicate `k` of `run`, e.g. `grucnn-low-seed1`.
    pub fn run_name(run: &RunSpec, k: usize) -> String {
        format!("{}-{}-seed{k}", run.model, run.snr_set.tag())
    }

    /// Every (run, replicate) pair in a fixed order.
    pub fn jobs(&self) -> Vec<(RunSpec, usize)> {
        self.runs
            .iter()
            .flat_map(|r| (0..self.train.seeds).map(move |k| (r.clone(), k)))
            .collect()
    }
}
