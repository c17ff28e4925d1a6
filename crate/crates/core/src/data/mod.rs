//! Corpus ingestion and noisy image-sequence generation.

pub mod cifar;
mod sequence;
mod snr;
pub mod toyset;

use serde::{Deserialize, Serialize};

pub use cifar::{load_cifar10, NUM_CLASSES};
pub use sequence::{
    draw_jitter, jitter_frame, make_batch, make_sequence, make_sequence_parts, make_training_batch,
    ImageSequenceBatch, Sequence, SequenceParts, SnrChoice, MAX_JITTER,
};
pub use snr::SnrLevel;
pub use toyset::synth_toyset;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One image `[3, h, w]` and its category.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub pixels: Tensor<f64>,
    pub label: usize,
}

/// Global pixel statistics of a corpus.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub mean: f64,
    pub std: f64,
}

pub fn corpus_stats(images: &[LabeledImage]) -> Result<CorpusStats> {
    let count: usize = images.iter().map(|i| i.pixels.len()).sum();
    if count == 0 {
        return Err(Error::invalid("empty corpus"));
    }
    let mean = images.iter().flat_map(|i| i.pixels.data()).sum::<f64>() / count as f64;
    let var = images
        .iter()
        .flat_map(|i| i.pixels.data())
        .map(|v| (v - mean).powi(2))
        .sum::<f64>()
        / count as f64;
    Ok(CorpusStats { mean, std: var.sqrt() })
}

/// Subtracts the single global pixel mean and divides by the single global
/// pixel standard deviation.
pub fn preprocess_corpus(images: &[LabeledImage]) -> Result<(Vec<LabeledImage>, CorpusStats)> {
    let stats = corpus_stats(images)?;
    if stats.std <= f64::EPSILON * stats.mean.abs().max(1.0) {
        return Err(Error::invalid("corpus has zero pixel variance"));
    }
    let normalized = images
        .iter()
        .map(|img| LabeledImage {
            pixels: img.pixels.map(|v| (v - stats.mean) / stats.std),
            label: img.label,
        })
        .collect();
    Ok((normalized, stats))
}

/// Applies previously computed statistics (e.g. training statistics to a
/// held-out split).
pub fn apply_stats(images: &[LabeledImage], stats: CorpusStats) -> Vec<LabeledImage> {
    images
        .iter()
        .map(|img| LabeledImage {
            pixels: img.pixels.map(|v| (v - stats.mean) / stats.std),
            label: img.label,
        })
        .collect()
}
