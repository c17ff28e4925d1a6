use serde::{Deserialize, Serialize};

use super::bayes::bayes_over_frames;
use super::table::PredictionTable;
use crate::data::{SnrLevel, NUM_CLASSES};
use crate::error::{Error, Result};

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccuracyCurve {
    pub snr: SnrLevel,
    pub bayes: bool,
    /// Percent correct at each frame.
    pub percent: Vec<f64>,
    /// Sequences (items x repetitions) behind each point.
    pub count: usize,
}

/// Percent of frames whose most probable class is the true label, per SNR
/// (ascending) and frame, averaged over items and repetitions.
pub fn accuracy_curve(table: &PredictionTable, with_bayes: bool) -> Result<Vec<AccuracyCurve>> {
    if table.is_empty() {
        return Err(Error::invalid("accuracy of an empty prediction table"));
    }
    let mut out = Vec::new();
    for snr in table.snr_levels() {
        let mut hits = vec![0usize; table.frames];
        let mut count = 0;
        for item in (0..table.items()).filter(|&i| table.snr[i] == snr) {
            for rep in 0..table.reps {
                let raw = table.sequence(item, rep);
                let folded;
                let seq = if with_bayes {
                    folded = bayes_over_frames(raw, NUM_CLASSES)?.0;
                    &folded[..]
                } else {
                    raw
                };
                for (f, row) in seq.chunks_exact(NUM_CLASSES).enumerate() {
                    if argmax(row) == table.labels[item] {
                        hits[f] += 1;
                    }
                }
                count += 1;
            }
        }
        out.push(AccuracyCurve {
            snr,
            bayes: with_bayes,
            percent: hits.iter().map(|&h| 100.0 * h as f64 / count as f64).collect(),
            count,
        });
    }
    Ok(out)
}
