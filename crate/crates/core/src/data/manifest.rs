use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetStats, ImageSample, ShapesSpec};
use crate::error::{Error, Result};
use crate::metrics::SegmentationMask;
use crate::nn::{io, Tensor};

/// Description of a dataset written to disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Generator settings, absent for ingested data.
    pub spec: Option<ShapesSpec>,
    pub source: String,
    pub train_len: usize,
    pub test_len: usize,
    pub stats: DatasetStats,
    /// File name to SHA-256.
    pub checksums: BTreeMap<String, String>,
}

/// Write a split as one tensor file with `images`, `labels` and, when every
/// sample has one, `masks`.
pub fn save_split(path: &Path, samples: &[ImageSample]) -> Result<()> {
    let images = super::batch_images(samples)?;
    let labels = Tensor::new(
        vec![samples.len()],
        samples.iter().map(|s| s.label as f32).collect(),
    )?;
    let mut records = vec![("images", &images), ("labels", &labels)];
    let masks;
    if samples.iter().all(|s| s.mask.is_some()) {
        let (h, w) = (images.shape()[2], images.shape()[3]);
        let data = samples
            .iter()
            .flat_map(|s| s.mask.as_ref().unwrap().data().iter().map(|&v| v as f32))
            .collect();
        masks = Tensor::new(vec![samples.len(), h, w], data)?;
        records.push(("masks", &masks));
    }
    std::fs::write(path, io::encode(records))?;
    Ok(())
}

pub fn load_split(path: &Path) -> Result<Vec<ImageSample>> {
    let records = io::decode(&std::fs::read(path)?)?;
    let find = |name: &str| records.iter().find(|(n, _)| n == name).map(|(_, t)| t);
    let images = find("images").ok_or_else(|| Error::Format("split without images".into()))?;
    let labels = find("labels").ok_or_else(|| Error::Format("split without labels".into()))?;
    if images.rank() != 4 || labels.len() != images.shape()[0] {
        return Err(Error::Format(format!(
            "images {:?} with {} labels",
            images.shape(),
            labels.len()
        )));
    }
    let (n, h, w) = (images.shape()[0], images.shape()[2], images.shape()[3]);
    let masks = find("masks");
    if let Some(m) = masks {
        if m.shape() != [n, h, w] {
            return Err(Error::Format(format!("masks {:?} for images {:?}", m.shape(), images.shape())));
        }
    }
    (0..n)
        .map(|i| {
            let mask = masks
                .map(|m| {
                    let plane = m.outer(i);
                    SegmentationMask::new(h, w, plane.iter().map(|&v| (v != 0.0) as u8).collect())
                })
                .transpose()?;
            Ok(ImageSample {
                image: Tensor::new(images.shape()[1..].to_vec(), images.outer(i).to_vec())?,
                label: labels.data()[i] as usize,
                mask,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_shapes, load_cifar10_batch};

    #[test]
    fn split_round_trip() {
        let spec = ShapesSpec {
            samples_per_class: 5,
            ..ShapesSpec::default()
        };
        let data = generate_shapes(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.camb");
        save_split(&path, &data.train).unwrap();
        assert_eq!(load_split(&path).unwrap(), data.train);
    }

    #[test]
    fn maskless_split_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("batch.bin");
        let mut bytes = vec![7u8; 2 * crate::data::CIFAR10_RECORD];
        bytes[0] = 1;
        std::fs::write(&raw, bytes).unwrap();
        let samples = load_cifar10_batch(&raw).unwrap();
        let path = dir.path().join("split.camb");
        save_split(&path, &samples).unwrap();
        assert_eq!(load_split(&path).unwrap(), samples);
    }
}
