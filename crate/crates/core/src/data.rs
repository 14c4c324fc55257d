//! CIFAR-10 binary batches.
//!
//! Each record is 3073 bytes: one label byte, then the red, green and blue
//! 32×32 planes in row-major order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
pub const RECORD_BYTES: usize = 1 + CHANNELS * IMAGE_SIZE * IMAGE_SIZE;
pub const CLASS_COUNT: usize = 10;

pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

/// Per-channel normalization `(x / 255 - mean) / std`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    /// Standard CIFAR-10 training-set channel statistics.
    fn default() -> Self {
        Self {
            mean: [0.4914, 0.4822, 0.4465],
            std: [0.2470, 0.2435, 0.2616],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    /// `3×32×32`, normalized.
    pub pixels: Tensor,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Decodes the records of one batch file, in file order.
pub fn parse_cifar10(bytes: &[u8], norm: &Normalization) -> Result<Vec<LabeledImage>> {
    if !bytes.len().is_multiple_of(RECORD_BYTES) {
        return Err(Error::CifarFormat(format!(
            "{} bytes is not a multiple of the {RECORD_BYTES}-byte record size",
            bytes.len()
        )));
    }
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    bytes
        .chunks_exact(RECORD_BYTES)
        .enumerate()
        .map(|(record, chunk)| {
            let label = chunk[0];
            if label as usize >= CLASS_COUNT {
                return Err(Error::CifarLabel { record, label });
            }
            let pixels = chunk[1..]
                .iter()
                .enumerate()
                .map(|(i, &b)| {
                    let c = i / plane;
                    (f32::from(b) / 255.0 - norm.mean[c]) / norm.std[c]
                })
                .collect();
            Ok(LabeledImage {
                pixels: Tensor::new(vec![CHANNELS, IMAGE_SIZE, IMAGE_SIZE], pixels)?,
                label: label as usize,
            })
        })
        .collect()
}

pub fn load_cifar10_file(
    path: impl AsRef<Path>,
    norm: &Normalization,
) -> Result<Vec<LabeledImage>> {
    parse_cifar10(&std::fs::read(path)?, norm)
}

/// Loads a split from a directory holding the standard batch files.
pub fn load_cifar10(
    dir: impl AsRef<Path>,
    split: Split,
    norm: &Normalization,
) -> Result<Vec<LabeledImage>> {
    let dir = dir.as_ref();
    let files: &[&str] = match split {
        Split::Train => &TRAIN_FILES,
        Split::Test => &[TEST_FILE],
    };
    let mut images = Vec::new();
    for f in files {
        images.extend(load_cifar10_file(dir.join(f), norm)?);
    }
    Ok(images)
}
