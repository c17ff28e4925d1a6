//! Jittered, noise-corrupted image sequences.
//!
//! Every frame is an independent integer translation (edge pixels
//! replicated) of the same source image plus independent white Gaussian
//! noise of variance `1 / snr` (the normalized corpus has unit pixel
//! variance). The finished sequence is standardized as a whole.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{LabeledImage, SnrLevel};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Element, Tensor};

pub const MAX_JITTER: i32 = 3;

/// Translates `[c, h, w]` by `(dx, dy)`; vacated pixels take the value of
/// the nearest pixel inside the image.
pub fn jitter_frame(image: &Tensor<f64>, dx: i32, dy: i32) -> Result<Tensor<f64>> {
    if dx.abs() > MAX_JITTER || dy.abs() > MAX_JITTER {
        return Err(Error::invalid(format!(
            "jitter ({dx}, {dy}) exceeds {MAX_JITTER} pixels"
        )));
    }
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::shape(format!("jitter_frame expects [c, h, w], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for ch in 0..c {
        for y in 0..h as i32 {
            let sy = (y - dy).clamp(0, h as i32 - 1) as usize;
            for x in 0..w as i32 {
                let sx = (x - dx).clamp(0, w as i32 - 1) as usize;
                out.push(src[(ch * h + sy) * w + sx]);
            }
        }
    }
    Tensor::from_vec(s.to_vec(), out)
}

/// Uniform integer offset in `[-3, 3]` on each axis.
pub fn draw_jitter<R: Rng + ?Sized>(rng: &mut R) -> (i32, i32) {
    (
        rng.random_range(-MAX_JITTER..=MAX_JITTER),
        rng.random_range(-MAX_JITTER..=MAX_JITTER),
    )
}

/// The pieces of one generated sequence before standardization.
#[derive(Clone, Debug)]
pub struct SequenceParts {
    /// `[t, c, h, w]` jittered clean frames
    pub clean: Vec<f64>,
    /// `[t, c, h, w]` additive noise
    pub noise: Vec<f64>,
    pub offsets: Vec<(i32, i32)>,
}

/// One standardized sequence `[t, c, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub frames: Tensor<f64>,
    pub label: usize,
    pub snr: SnrLevel,
}

fn check_sequence_args(frames: usize, snr: SnrLevel) -> Result<()> {
    if frames < 1 {
        return Err(Error::invalid("a sequence needs at least one frame"));
    }
    if snr.value() <= 0.0 {
        return Err(Error::invalid(format!("SNR {snr} must be positive")));
    }
    Ok(())
}

pub fn make_sequence_parts<R: Rng + ?Sized>(
    image: &LabeledImage,
    frames: usize,
    snr: SnrLevel,
    rng: &mut R,
) -> Result<SequenceParts> {
    check_sequence_args(frames, snr)?;
    let n = image.pixels.len();
    let sigma = snr.noise_std();
    let mut parts = SequenceParts {
        clean: Vec::with_capacity(frames * n),
        noise: Vec::with_capacity(frames * n),
        offsets: Vec::with_capacity(frames),
    };
    for _ in 0..frames {
        let (dx, dy) = draw_jitter(rng);
        parts.offsets.push((dx, dy));
        parts.clean.extend_from_slice(jitter_frame(&image.pixels, dx, dy)?.data());
        parts
            .noise
            .extend((0..n).map(|_| sigma * rng.sample::<f64, _>(StandardNormal)));
    }
    Ok(parts)
}

/// Jitters, corrupts and standardizes (mean 0, std 1 over all frames,
/// channels and pixels) `frames` copies of `image`.
pub fn make_sequence<R: Rng + ?Sized>(image: &LabeledImage, frames: usize, snr: SnrLevel, rng: &mut R) -> Result<Sequence> {
    let parts = make_sequence_parts(image, frames, snr, rng)?;
    let mut data: Vec<f64> = parts.clean.iter().zip(&parts.noise).map(|(c, n)| c + n).collect();
    let len = data.len() as f64;
    let mean = data.iter().sum::<f64>() / len;
    let std = (data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len).sqrt();
    let scale = if std > 0.0 { 1.0 / std } else { 1.0 };
    for v in &mut data {
        *v = (*v - mean) * scale;
    }
    let mut shape = vec![frames];
    shape.extend_from_slice(image.pixels.shape());
    Ok(Sequence {
        frames: Tensor::from_vec(shape, data)?,
        label: image.label,
        snr,
    })
}

/// How each batch item picks its SNR.
#[derive(Clone, Debug)]
pub enum SnrChoice<'a> {
    /// Uniform draw from the set, one level per sequence.
    Uniform(&'a [SnrLevel]),
    Fixed(SnrLevel),
}

/// A batch of sequences `[batch, t, c, h, w]`.
#[derive(Clone, Debug)]
pub struct ImageSequenceBatch<T> {
    pub frames: Tensor<T>,
    pub labels: Vec<usize>,
    pub snr: Vec<SnrLevel>,
    pub seed: u64,
}

impl<T: Element> ImageSequenceBatch<T> {
    pub fn batch_size(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn frames_per_item(&self) -> usize {
        self.frames.shape()[1]
    }

    /// Frame `t` of every item, `[batch, c, h, w]`.
    pub fn frame(&self, t: usize) -> Tensor<T> {
        let s = self.frames.shape();
        let (b, tt) = (s[0], s[1]);
        let per: usize = s[2..].iter().product();
        let mut data = Vec::with_capacity(b * per);
        for i in 0..b {
            data.extend_from_slice(&self.frames.data()[(i * tt + t) * per..][..per]);
        }
        let mut shape = vec![b];
        shape.extend_from_slice(&s[2..]);
        Tensor::from_vec(shape, data).expect("frame shape")
    }
}

/// Builds the sequences for `indices` into `corpus`. Item `k` draws from its
/// own stream keyed by `(seed, k)`, so the result does not depend on how the
/// items are scheduled.
pub fn make_batch<T: Element>(
    corpus: &[LabeledImage],
    indices: &[usize],
    frames: usize,
    snr: SnrChoice<'_>,
    seed: u64,
) -> Result<ImageSequenceBatch<T>> {
    if let SnrChoice::Uniform(set) = snr {
        if set.is_empty() {
            return Err(Error::invalid("empty SNR set"));
        }
    }
    if indices.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let shape0 = corpus
        .get(indices[0])
        .ok_or_else(|| Error::invalid(format!("image index {} out of range", indices[0])))?
        .pixels
        .shape()
        .to_vec();
    let mut data = Vec::new();
    let mut labels = Vec::with_capacity(indices.len());
    let mut snrs = Vec::with_capacity(indices.len());
    for (k, &idx) in indices.iter().enumerate() {
        let image = corpus
            .get(idx)
            .ok_or_else(|| Error::invalid(format!("image index {idx} out of range")))?;
        if image.pixels.shape() != shape0.as_slice() {
            return Err(Error::shape("corpus images differ in shape"));
        }
        let mut r = rng::stream(seed, &[k as u64]);
        let level = match snr {
            SnrChoice::Uniform(set) => set[r.random_range(0..set.len())],
            SnrChoice::Fixed(level) => level,
        };
        let seq = make_sequence(image, frames, level, &mut r)?;
        data.extend(seq.frames.data().iter().map(|&v| T::of(v)));
        labels.push(seq.label);
        snrs.push(level);
    }
    let mut shape = vec![indices.len(), frames];
    shape.extend_from_slice(&shape0);
    Ok(ImageSequenceBatch {
        frames: Tensor::from_vec(shape, data)?,
        labels,
        snr: snrs,
        seed,
    })
}

/// Samples `batch` images uniformly (with replacement) and builds their
/// sequences, each at an SNR drawn uniformly from `snr_set`.
pub fn make_training_batch<T: Element, R: Rng + ?Sized>(
    corpus: &[LabeledImage],
    batch: usize,
    frames: usize,
    snr_set: &[SnrLevel],
    rng: &mut R,
) -> Result<ImageSequenceBatch<T>> {
    if corpus.is_empty() {
        return Err(Error::invalid("empty corpus"));
    }
    if snr_set.is_empty() {
        return Err(Error::invalid("empty SNR set"));
    }
    let indices: Vec<usize> = (0..batch).map(|_| rng.random_range(0..corpus.len())).collect();
    let seed = rng.random();
    make_batch(corpus, &indices, frames, SnrChoice::Uniform(snr_set), seed)
}
