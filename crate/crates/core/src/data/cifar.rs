//! CIFAR-10 binary batches: records of one label byte followed by the red,
//! green and blue planes, each row-major.

use std::path::Path;

use super::LabeledImage;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
pub const NUM_CLASSES: usize = 10;

pub fn record_len(image_size: usize) -> usize {
    1 + CHANNELS * image_size * image_size
}

/// Parses a sequence of label+planes records of `image_size`-square images.
/// `base_offset` is added to reported byte offsets.
pub fn parse_records(bytes: &[u8], image_size: usize, base_offset: u64) -> Result<Vec<LabeledImage>> {
    let rec = record_len(image_size);
    if bytes.len() % rec != 0 {
        let whole = bytes.len() / rec;
        return Err(Error::format(
            base_offset + (whole * rec) as u64,
            format!(
                "truncated record: {} trailing bytes, records are {rec} bytes",
                bytes.len() - whole * rec
            ),
        ));
    }
    bytes
        .chunks_exact(rec)
        .enumerate()
        .map(|(i, chunk)| {
            let label = chunk[0];
            if label as usize >= NUM_CLASSES {
                return Err(Error::format(
                    base_offset + (i * rec) as u64,
                    format!("label byte {label} is not a category in 0..{NUM_CLASSES}"),
                ));
            }
            let pixels = chunk[1..].iter().map(|&b| b as f64).collect();
            Ok(LabeledImage {
                pixels: Tensor::from_vec([CHANNELS, image_size, image_size], pixels)?,
                label: label as usize,
            })
        })
        .collect()
}

/// Loads one CIFAR-10 binary batch file. Pixel values stay in `[0, 255]`.
pub fn load_cifar10(path: impl AsRef<Path>) -> Result<Vec<LabeledImage>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_records(&bytes, CIFAR_SIZE, 0)
}

pub fn encode_records(images: &[LabeledImage]) -> Vec<u8> {
    let mut out = Vec::new();
    for img in images {
        out.push(img.label as u8);
        out.extend(img.pixels.data().iter().map(|&v| v.round().clamp(0.0, 255.0) as u8));
    }
    out
}
