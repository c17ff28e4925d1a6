use serde::{Deserialize, Serialize};

use crate::tensor::Element;

/// Batch-norm hyperparameters (Keras defaults).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormConfig {
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig {
            momentum: 0.99,
            eps: 1e-3,
        }
    }
}

/// Per-channel running mean and variance, shared across time frames.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Element> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub(crate) fn update(&mut self, batch_mean: &[T], batch_var: &[T], momentum: T) {
        let keep = momentum;
        let take = T::one() - momentum;
        for (m, &bm) in self.mean.iter_mut().zip(batch_mean) {
            *m = keep * *m + take * bm;
        }
        for (v, &bv) in self.var.iter_mut().zip(batch_var) {
            *v = keep * *v + take * bv;
        }
    }
}

/// Per-channel (mean, biased variance) over batch and spatial axes of
/// `[batch, ch, hw]` data.
pub(crate) fn channel_moments<T: Element>(x: &[T], batch: usize, ch: usize, hw: usize) -> (Vec<T>, Vec<T>) {
    let count = T::of((batch * hw) as f64);
    let mut mean = vec![T::zero(); ch];
    let mut var = vec![T::zero(); ch];
    for c in 0..ch {
        let mut acc = T::zero();
        for b in 0..batch {
            acc += x[(b * ch + c) * hw..][..hw].iter().copied().sum::<T>();
        }
        let m = acc / count;
        let mut sq = T::zero();
        for b in 0..batch {
            for &v in &x[(b * ch + c) * hw..][..hw] {
                let d = v - m;
                sq += d * d;
            }
        }
        mean[c] = m;
        var[c] = sq / count;
    }
    (mean, var)
}
