use serde::{Deserialize, Serialize};

use super::table::PredictionTable;
use crate::data::NUM_CLASSES;
use crate::error::{Error, Result};

pub const RELIABILITY_BINS: usize = 50;

/// Every probability at `frame` paired with whether its class is the item's
/// true label, in item, repetition, class order.
pub fn pooled_predictions(table: &PredictionTable, frame: usize) -> Result<Vec<(f64, bool)>> {
    if frame >= table.frames {
        return Err(Error::invalid(format!("frame {frame} out of range 0..{}", table.frames)));
    }
    let mut out = Vec::with_capacity(table.items() * table.reps * NUM_CLASSES);
    for item in 0..table.items() {
        for rep in 0..table.reps {
            for (k, &p) in table.row(item, rep, frame).iter().enumerate() {
                out.push((p, k == table.labels[item]));
            }
        }
    }
    Ok(out)
}

/// Indices of `values` in ascending order; equal values keep pool order.
pub(crate) fn rank_order(values: &[(f64, bool)]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| values[i].0.total_cmp(&values[j].0));
    idx
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReliabilityBin {
    pub lo_percentile: f64,
    pub hi_percentile: f64,
    pub mean_p: f64,
    pub fraction_positive: f64,
    pub count: usize,
    pub positives: usize,
}

/// Ranks the pool and cuts it into `bins` equal-count percentile intervals;
/// bin i holds ranks `floor(i N / bins) .. floor((i + 1) N / bins)`.
pub fn bins_from_pool(pool: &[(f64, bool)], bins: usize) -> Result<Vec<ReliabilityBin>> {
    if bins == 0 || pool.len() < bins {
        return Err(Error::invalid(format!("{} predictions cannot fill {bins} bins", pool.len())));
    }
    let order = rank_order(pool);
    let n = pool.len();
    Ok((0..bins)
        .map(|i| {
            let members = &order[i * n / bins..(i + 1) * n / bins];
            let positives = members.iter().filter(|&&m| pool[m].1).count();
            let count = members.len();
            ReliabilityBin {
                lo_percentile: 100.0 * i as f64 / bins as f64,
                hi_percentile: 100.0 * (i + 1) as f64 / bins as f64,
                mean_p: members.iter().map(|&m| pool[m].0).sum::<f64>() / count as f64,
                fraction_positive: positives as f64 / count as f64,
                count,
                positives,
            }
        })
        .collect())
}

/// 50 two-percentile bins over every prediction at `frame`.
pub fn reliability_bins(table: &PredictionTable, frame: usize) -> Result<Vec<ReliabilityBin>> {
    bins_from_pool(&pooled_predictions(table, frame)?, RELIABILITY_BINS)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Which {
    /// True-label entries.
    Positive,
    /// All other entries.
    Negative,
}

/// Empirical distribution of probabilities at one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceCdf {
    sorted: Vec<f64>,
}

impl ConfidenceCdf {
    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    /// Fraction of samples `<= x`.
    pub fn at(&self, x: f64) -> f64 {
        self.sorted.partition_point(|&v| v <= x) as f64 / self.len() as f64
    }

    /// Fraction strictly below `x`.
    pub fn fraction_below(&self, x: f64) -> f64 {
        self.sorted.partition_point(|&v| v < x) as f64 / self.len() as f64
    }

    /// Fraction strictly above `x`.
    pub fn fraction_above(&self, x: f64) -> f64 {
        1.0 - self.at(x)
    }

    pub fn values(&self) -> &[f64] {
        &self.sorted
    }
}

pub fn confidence_cdf(table: &PredictionTable, frame: usize, which: Which) -> Result<ConfidenceCdf> {
    let want = which == Which::Positive;
    let mut sorted: Vec<f64> = pooled_predictions(table, frame)?
        .into_iter()
        .filter(|&(_, pos)| pos == want)
        .map(|(p, _)| p)
        .collect();
    if sorted.is_empty() {
        return Err(Error::invalid("confidence CDF over an empty selection"));
    }
    sorted.sort_by(f64::total_cmp);
    Ok(ConfidenceCdf { sorted })
}
