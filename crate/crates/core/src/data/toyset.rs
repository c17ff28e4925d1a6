//! Procedural ten-class shape corpus used as a desk-scale stand-in for
//! CIFAR-10.
//!
//! Archive layout (little endian):
//!
//! | bytes | field                                  |
//! |-------|----------------------------------------|
//! | 8     | magic `GRUTOYS1`                       |
//! | 4     | format version (`1`)                   |
//! | 4     | image size `S` (square)                |
//! | 4     | channels (`3`)                         |
//! | 4     | image count `N`                        |
//! | N*(1+3*S*S) | CIFAR-style records: label byte, then R, G, B planes |

use std::path::Path;

use rand::Rng;

use super::cifar::{encode_records, parse_records, record_len, CHANNELS, NUM_CLASSES};
use super::LabeledImage;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"GRUTOYS1";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "horizontal_bar",
    "vertical_bar",
    "diagonal",
    "anti_diagonal",
    "disk",
    "ring",
    "plus",
    "cross",
    "checker",
    "square_frame",
];

/// Soft indicator of `dist < half_width` with a one-pixel ramp.
fn band(dist: f64, half_width: f64, px: f64) -> f64 {
    ((half_width - dist) / px + 0.5).clamp(0.0, 1.0)
}

fn coverage(class: usize, u: f64, v: f64, p: &ShapeParams, px: f64) -> f64 {
    let rho = (u * u + v * v).sqrt();
    let diag = (u - v).abs() / std::f64::consts::SQRT_2;
    let anti = (u + v).abs() / std::f64::consts::SQRT_2;
    let t = p.thickness;
    match class {
        0 => band(v.abs(), t, px),
        1 => band(u.abs(), t, px),
        2 => band(diag, t, px),
        3 => band(anti, t, px),
        4 => band(rho, p.radius, px),
        5 => band((rho - p.radius).abs(), t, px),
        6 => band(u.abs(), t, px).max(band(v.abs(), t, px)) * band(u.abs().max(v.abs()), p.radius, px),
        7 => band(diag, t, px).max(band(anti, t, px)) * band(rho, p.radius * 1.2, px),
        8 => {
            let k = p.period;
            let cell = ((u + p.phase.0) / k).floor() + ((v + p.phase.1) / k).floor();
            if cell.rem_euclid(2.0) < 1.0 {
                1.0
            } else {
                0.0
            }
        }
        9 => band((u.abs().max(v.abs()) - p.radius).abs(), t, px),
        _ => unreachable!("class index checked by caller"),
    }
}

struct ShapeParams {
    centre: (f64, f64),
    radius: f64,
    thickness: f64,
    period: f64,
    phase: (f64, f64),
}

fn random_colours<R: Rng + ?Sized>(rng: &mut R) -> ([f64; 3], [f64; 3]) {
    loop {
        let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(20.0..235.0));
        let fg: [f64; 3] = std::array::from_fn(|_| rng.random_range(20.0..235.0));
        let lum = |c: &[f64; 3]| 0.3 * c[0] + 0.59 * c[1] + 0.11 * c[2];
        if (lum(&fg) - lum(&bg)).abs() >= 70.0 {
            return (bg, fg);
        }
    }
}

fn render<R: Rng + ?Sized>(class: usize, size: usize, rng: &mut R) -> Tensor<f64> {
    let params = ShapeParams {
        centre: (rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)),
        radius: rng.random_range(0.45..0.7),
        thickness: rng.random_range(0.14..0.24),
        period: rng.random_range(0.35..0.55),
        phase: (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)),
    };
    let (bg, fg) = random_colours(rng);
    let px = 2.0 / size as f64;
    let mut data = vec![0.0; CHANNELS * size * size];
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5) * px - 1.0 - params.centre.0;
            let v = (y as f64 + 0.5) * px - 1.0 - params.centre.1;
            let a = coverage(class, u, v, &params, px);
            for c in 0..CHANNELS {
                let texture = rng.random_range(-8.0..8.0);
                let val = bg[c] * (1.0 - a) + fg[c] * a + texture;
                data[(c * size + y) * size + x] = val.round().clamp(0.0, 255.0);
            }
        }
    }
    Tensor::from_vec([CHANNELS, size, size], data).expect("render shape")
}

/// `n_per_class` images of every class, interleaved by class, with pixel
/// values quantized to `[0, 255]`. Deterministic for a given rng state.
pub fn synth_toyset<R: Rng + ?Sized>(n_per_class: usize, image_size: usize, rng: &mut R) -> Result<Vec<LabeledImage>> {
    if image_size < 8 {
        return Err(Error::invalid(format!("toyset image size {image_size} is below the minimum of 8")));
    }
    let mut out = Vec::with_capacity(n_per_class * NUM_CLASSES);
    for _ in 0..n_per_class {
        for class in 0..NUM_CLASSES {
            out.push(LabeledImage {
                pixels: render(class, image_size, rng),
                label: class,
            });
        }
    }
    Ok(out)
}

pub fn encode_archive(images: &[LabeledImage]) -> Result<Vec<u8>> {
    let size = images.first().map_or(0, |i| i.pixels.shape()[1]);
    if let Some(bad) = images.iter().find(|i| i.pixels.shape() != [CHANNELS, size, size]) {
        return Err(Error::shape(format!(
            "archive images must share shape [3, {size}, {size}], found {:?}",
            bad.pixels.shape()
        )));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + images.len() * record_len(size));
    out.extend_from_slice(MAGIC);
    for v in [VERSION, size as u32, CHANNELS as u32, images.len() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend(encode_records(images));
    Ok(out)
}

pub fn decode_archive(bytes: &[u8]) -> Result<Vec<LabeledImage>> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(bytes.len() as u64, "archive shorter than its 24-byte header"));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::format(0, "bad toyset magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().expect("4 bytes"));
    let (version, size, channels, count) = (word(0), word(1) as usize, word(2) as usize, word(3) as usize);
    if version != VERSION {
        return Err(Error::format(8, format!("unsupported toyset version {version}")));
    }
    if channels != CHANNELS {
        return Err(Error::format(16, format!("expected 3 channels, header says {channels}")));
    }
    let body = &bytes[HEADER_LEN..];
    let want = count * record_len(size);
    if body.len() != want {
        return Err(Error::format(
            (HEADER_LEN + body.len().min(want)) as u64,
            format!("header promises {count} images ({want} bytes) but body has {} bytes", body.len()),
        ));
    }
    parse_records(body, size, HEADER_LEN as u64)
}

pub fn write_archive(path: impl AsRef<Path>, images: &[LabeledImage]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_archive(images)?).map_err(|e| Error::io(path, e))
}

pub fn read_archive(path: impl AsRef<Path>) -> Result<Vec<LabeledImage>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_archive(&bytes)
}
