//! The training loop: frame-averaged cross-entropy minimized with RMSProp.
//!
//! Every random draw is keyed by the run seed and the position in training
//! (epoch for the shuffle, global step for sequences and dropout masks), so a
//! run resumed from a checkpoint continues exactly where it stopped.

use std::io::Write;
use std::ops::Range;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::Model;
use super::optim::RmsProp;
use crate::data::{make_batch, LabeledImage, SnrChoice, SnrLevel};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};
use crate::tensor::{Element, Tensor};

const SHUFFLE: u64 = 1;
const SEQUENCES: u64 = 2;
const DROPOUT: u64 = 3;

/// Named SNR sets, or an explicit list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SnrSet {
    Named(SnrSetName),
    Levels(Vec<SnrLevel>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnrSetName {
    Default,
    Low,
}

impl SnrSet {
    pub const DEFAULT: SnrSet = SnrSet::Named(SnrSetName::Default);
    pub const LOW: SnrSet = SnrSet::Named(SnrSetName::Low);

    pub fn levels(&self) -> Vec<SnrLevel> {
        match self {
            SnrSet::Named(SnrSetName::Default) => SnrLevel::default_training_set(),
            SnrSet::Named(SnrSetName::Low) => SnrLevel::low_training_set(),
            SnrSet::Levels(v) => v.clone(),
        }
    }

    /// Short tag used in run directory names.
    pub fn tag(&self) -> String {
        match self {
            SnrSet::Named(SnrSetName::Default) => "default".into(),
            SnrSet::Named(SnrSetName::Low) => "low".into(),
            SnrSet::Levels(v) => {
                let parts: Vec<String> = v.iter().map(|l| l.to_string().replace('/', "_")).collect();
                format!("custom-{}", parts.join("-"))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Learning-rate decay per update.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Frames per training sequence.
    pub frames: usize,
    pub snr_set: SnrSet,
    /// Number of independently seeded replicate runs.
    pub seeds: usize,
    /// Base seed; replicate `k` trains with `derive_seed(seed, [k])`.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            lr_decay: 1e-6,
            batch_size: 64,
            epochs: 100,
            frames: 26,
            snr_set: SnrSet::DEFAULT,
            seeds: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be finite and non-negative", self.learning_rate));
        }
        if !(self.lr_decay >= 0.0 && self.lr_decay.is_finite()) {
            return bad(format!("lr_decay {} must be finite and non-negative", self.lr_decay));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size {} must be at least 2", self.batch_size));
        }
        if self.epochs == 0 || self.frames == 0 || self.seeds == 0 {
            return bad("epochs, frames and seeds must be positive".into());
        }
        if self.snr_set.levels().is_empty() {
            return bad("snr_set is empty".into());
        }
        Ok(())
    }

    /// Seed of replicate `k`.
    pub fn replicate_seed(&self, k: usize) -> u64 {
        derive_seed(self.seed, &[k as u64])
    }
}

/// Position in training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    pub epoch: u64,
    /// Batch index within the current epoch.
    pub batch: u64,
    /// Completed updates.
    pub step: u64,
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

pub const LOG_HEADER: &str = "step,epoch,loss,lr,wall_ms";

impl LogRow {
    pub fn csv(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.epoch, self.loss, self.lr, self.wall_ms)
    }
}

/// Splits `n` shuffled items into batches of `size`; a trailing batch of one
/// item is merged into its predecessor so batch statistics stay defined.
pub fn batch_ranges(n: usize, size: usize) -> Vec<Range<usize>> {
    let mut out: Vec<Range<usize>> = (0..n).step_by(size.max(1)).map(|s| s..(s + size).min(n)).collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").end = last.end;
    }
    out
}

/// A model, its optimizer and its position in a training run.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub model: Model<T>,
    pub optimizer: RmsProp<T>,
    pub config: TrainConfig,
    pub counters: Counters,
    /// Seed all data and dropout streams derive from.
    pub seed: u64,
}

impl<T: Element> Trainer<T> {
    pub fn new(model: Model<T>, config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let shapes: Vec<&[usize]> = model.params().iter().map(|p| p.value.shape()).collect();
        let optimizer = RmsProp::new(config.learning_rate, config.lr_decay, &shapes);
        Ok(Trainer {
            model,
            optimizer,
            config,
            counters: Counters::default(),
            seed,
        })
    }

    pub fn is_finished(&self) -> bool {
        self.counters.epoch >= self.config.epochs as u64
    }

    fn epoch_order(&self, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(self.seed, &[SHUFFLE, self.counters.epoch]));
        order
    }

    /// Performs one update on the next batch of the current epoch.
    pub fn step(&mut self, corpus: &[LabeledImage]) -> Result<LogRow> {
        if corpus.len() < 2 {
            return Err(Error::invalid("training needs at least two images"));
        }
        let ranges = batch_ranges(corpus.len(), self.config.batch_size);
        let order = self.epoch_order(corpus.len());
        let range = ranges
            .get(self.counters.batch as usize)
            .cloned()
            .ok_or_else(|| Error::invalid("batch counter beyond the end of the epoch"))?;
        let levels = self.config.snr_set.levels();
        let step = self.counters.step;
        let batch = make_batch::<T>(
            corpus,
            &order[range],
            self.config.frames,
            SnrChoice::Uniform(&levels),
            derive_seed(self.seed, &[SEQUENCES, step]),
        )?;
        let mut drop_rng = stream(self.seed, &[DROPOUT, step]);
        let lr = self.optimizer.current_lr();
        let out = self.model.loss_and_grads(&batch, &mut drop_rng)?;
        let loss = out.loss.to_f64().unwrap_or(f64::NAN);
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step,
                reason: format!("loss is {loss}"),
            });
        }
        let mut params: Vec<&mut Tensor<T>> = self.model.params_mut().iter_mut().map(|p| &mut p.value).collect();
        self.optimizer.step(&mut params, &out.grads).map_err(|e| match e {
            Error::Divergence { reason, .. } => Error::Divergence { step, reason },
            other => other,
        })?;
        let row = LogRow {
            step,
            epoch: self.counters.epoch,
            loss,
            lr,
            wall_ms: 0,
        };
        self.counters.step += 1;
        self.counters.batch += 1;
        if self.counters.batch as usize >= ranges.len() {
            self.counters.batch = 0;
            self.counters.epoch += 1;
        }
        Ok(row)
    }

    /// Trains until the configured number of epochs is reached, calling
    /// `on_step` after every update and `on_epoch` after every completed
    /// epoch. `wall_ms` counts from the start of this call.
    pub fn run(
        &mut self,
        corpus: &[LabeledImage],
        mut on_step: impl FnMut(&LogRow) -> Result<()>,
        mut on_epoch: impl FnMut(&Self) -> Result<()>,
    ) -> Result<()> {
        let start = Instant::now();
        while !self.is_finished() {
            let epoch = self.counters.epoch;
            let mut row = self.step(corpus)?;
            row.wall_ms = start.elapsed().as_millis() as u64;
            on_step(&row)?;
            if self.counters.epoch != epoch {
                on_epoch(self)?;
            }
        }
        Ok(())
    }
}

/// Appends log rows as CSV, writing the header first when `fresh`.
pub struct LogWriter<W: Write> {
    out: W,
}

impl<W: Write> LogWriter<W> {
    pub fn new(mut out: W, fresh: bool) -> std::io::Result<Self> {
        if fresh {
            writeln!(out, "{LOG_HEADER}")?;
        }
        Ok(LogWriter { out })
    }

    pub fn write(&mut self, row: &LogRow) -> std::io::Result<()> {
        writeln!(self.out, "{}", row.csv())?;
        self.out.flush()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_everything_once() {
        assert_eq!(batch_ranges(10, 4), vec![0..4, 4..8, 8..10]);
        assert_eq!(batch_ranges(9, 4), vec![0..4, 4..9]);
        assert_eq!(batch_ranges(3, 8), vec![0..3]);
    }

    #[test]
    fn config_round_trips_and_validates() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<TrainConfig>(&text).unwrap(), c);
        let low: TrainConfig = toml::from_str("snr_set = \"low\"\nepochs = 2").unwrap();
        assert_eq!(low.snr_set.levels().len(), 8);
        let custom: TrainConfig = toml::from_str("snr_set = [\"4\", \"1/16\"]").unwrap();
        assert_eq!(custom.snr_set.levels(), vec![SnrLevel::whole(4), SnrLevel::inverse(16)]);
        assert!(TrainConfig { snr_set: SnrSet::Levels(vec![]), ..c.clone() }.validate().is_err());
        assert!(TrainConfig { batch_size: 1, ..c.clone() }.validate().is_err());
        assert!(toml::from_str::<TrainConfig>("bogus = 1").is_err());
    }
}
