use serde::{Deserialize, Serialize};

use super::reliability::{pooled_predictions, rank_order};
use super::table::PredictionTable;
use crate::data::SnrLevel;
use crate::error::{Error, Result};

pub const DEFAULT_REJECTION_PERCENTILE: f64 = 20.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RejectionRate {
    pub snr: SnrLevel,
    pub frame: usize,
    pub percentile: f64,
    /// Fraction of rejected entries whose class is the true label.
    pub rate: f64,
    pub rejected: usize,
    pub pool: usize,
}

/// Rejects the lowest `percentile` percent of the pool (by rank; equal values
/// keep pool order) and returns the fraction of rejected entries that were
/// the true class, plus the number rejected.
pub fn rejection_from_pool(pool: &[(f64, bool)], percentile: f64) -> Result<(f64, usize)> {
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(Error::invalid(format!("rejection percentile {percentile} outside (0, 100]")));
    }
    let k = (pool.len() as f64 * percentile / 100.0).floor() as usize;
    if k == 0 {
        return Err(Error::invalid(format!(
            "a pool of {} predictions is too small for the lowest {percentile}%",
            pool.len()
        )));
    }
    let order = rank_order(pool);
    let hits = order[..k].iter().filter(|&&i| pool[i].1).count();
    Ok((hits as f64 / k as f64, k))
}

/// False rejection rate at `frame` for each SNR in the table (ascending).
pub fn false_rejection_rate(table: &PredictionTable, frame: usize, percentile: f64) -> Result<Vec<RejectionRate>> {
    if table.is_empty() {
        return Err(Error::invalid("false rejection on an empty prediction table"));
    }
    table
        .snr_levels()
        .into_iter()
        .map(|snr| {
            let pool = pooled_predictions(&table.select_snr(snr), frame)?;
            let (rate, rejected) = rejection_from_pool(&pool, percentile)?;
            Ok(RejectionRate {
                snr,
                frame,
                percentile,
                rate,
                rejected,
                pool: pool.len(),
            })
        })
        .collect()
}
