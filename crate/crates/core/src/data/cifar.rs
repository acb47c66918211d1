use std::path::Path;

use super::ImageSample;
use crate::error::{Error, Result};
use crate::nn::Tensor;

/// One label byte followed by a 3x32x32 planar image.
pub const CIFAR10_RECORD: usize = 1 + 3 * 32 * 32;

/// Read a CIFAR-10 binary batch. Samples carry no masks.
pub fn load_cifar10_batch(path: &Path) -> Result<Vec<ImageSample>> {
    let bytes = std::fs::read(path)?;
    if bytes.is_empty() || bytes.len() % CIFAR10_RECORD != 0 {
        return Err(Error::Format(format!(
            "{}: {} bytes is not a whole number of {CIFAR10_RECORD}-byte records",
            path.display(),
            bytes.len()
        )));
    }
    bytes
        .chunks(CIFAR10_RECORD)
        .map(|rec| {
            let label = rec[0] as usize;
            if label >= 10 {
                return Err(Error::Format(format!("label {label} out of range")));
            }
            let data = rec[1..].iter().map(|&b| b as f32 / 255.0).collect();
            Ok(ImageSample {
                image: Tensor::new(vec![3, 32, 32], data)?,
                label,
                mask: None,
            })
        })
        .collect()
}
