//! Datasets, normalization statistics and augmentation.

mod augment;
mod cifar;
mod manifest;
mod shapes;

pub use augment::{augment, AugmentationPolicy, Blur, ColorJitter};
pub use cifar::{load_cifar10_batch, CIFAR10_RECORD};
pub use manifest::{load_split, save_split, DatasetManifest};
pub use shapes::{draw_sample, generate_shapes, Dataset, Placement, ShapeKind, ShapesSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::SegmentationMask;
use crate::nn::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    /// `[c, h, w]`, values in [0,1] before normalization.
    pub image: Tensor,
    pub label: usize,
    pub mask: Option<SegmentationMask>,
}

impl ImageSample {
    pub fn channels(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

/// Stream-separated seed for sample `index`, so any sample can be regenerated alone.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    mix(mix(mix(base) ^ stream) ^ index)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl DatasetStats {
    pub fn new(mean: Vec<f32>, std: Vec<f32>) -> Result<Self> {
        let stats = Self { mean, std };
        stats.validate()?;
        Ok(stats)
    }

    pub fn cifar10() -> Self {
        Self {
            mean: vec![0.491, 0.482, 0.447],
            std: vec![0.247, 0.244, 0.262],
        }
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.std.len() {
            return Err(Error::Numeric("stats mean/std lengths differ".into()));
        }
        if let Some(s) = self.std.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::Numeric(format!("channel std {s} is not positive")));
        }
        Ok(())
    }

    /// Per-channel population mean and std over a set of `[c,h,w]` images.
    pub fn from_samples(samples: &[ImageSample]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Numeric("stats of an empty dataset".into()))?;
        let c = first.channels();
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        let mut count = 0usize;
        for s in samples {
            if s.image.shape() != first.image.shape() {
                return Err(Error::dim("images of different shapes"));
            }
            let plane = s.height() * s.width();
            for (ch, chunk) in s.image.data().chunks(plane).enumerate() {
                for &v in chunk {
                    sum[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
            }
            count += plane;
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| ((q / n - m * m).max(0.0)).sqrt() as f32)
            .collect();
        Self::new(mean.into_iter().map(|m| m as f32).collect(), std)
    }

    fn check(&self, image: &Tensor) -> Result<()> {
        self.validate()?;
        if image.rank() != 3 || image.shape()[0] != self.mean.len() {
            return Err(Error::dim(format!(
                "image {:?} against {}-channel stats",
                image.shape(),
                self.mean.len()
            )));
        }
        Ok(())
    }

    pub fn normalize_image(&self, image: &Tensor) -> Result<Tensor> {
        self.check(image)?;
        Ok(self.channelwise(image, |v, m, s| (v - m) / s))
    }

    pub fn denormalize_image(&self, image: &Tensor) -> Result<Tensor> {
        self.check(image)?;
        Ok(self.channelwise(image, |v, m, s| v * s + m))
    }

    fn channelwise(&self, image: &Tensor, f: impl Fn(f32, f32, f32) -> f32) -> Tensor {
        let plane = image.shape()[1] * image.shape()[2];
        let mut out = image.clone();
        for (ch, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let (m, s) = (self.mean[ch], self.std[ch]);
            chunk.iter_mut().for_each(|v| *v = f(*v, m, s));
        }
        out
    }
}

pub fn normalize(sample: &ImageSample, stats: &DatasetStats) -> Result<ImageSample> {
    Ok(ImageSample {
        image: stats.normalize_image(&sample.image)?,
        ..sample.clone()
    })
}

pub fn denormalize(sample: &ImageSample, stats: &DatasetStats) -> Result<ImageSample> {
    Ok(ImageSample {
        image: stats.denormalize_image(&sample.image)?,
        ..sample.clone()
    })
}

/// Stack samples into an `[n, c, h, w]` batch.
pub fn batch_images<'a>(samples: impl IntoIterator<Item = &'a ImageSample>) -> Result<Tensor> {
    let images: Vec<&Tensor> = samples.into_iter().map(|s| &s.image).collect();
    Tensor::stack(&images)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(c: usize, seed: u64) -> Tensor {
        let data = (0..c * 16)
            .map(|i| (derive_seed(seed, 0, i as u64) % 1000) as f32 / 1000.0)
            .collect();
        Tensor::new(vec![c, 4, 4], data).unwrap()
    }

    #[test]
    fn identity_stats_leave_images_alone() {
        let img = image(3, 1);
        assert_eq!(DatasetStats::identity(3).normalize_image(&img).unwrap(), img);
    }

    #[test]
    fn normalize_round_trip() {
        let stats = DatasetStats::cifar10();
        for seed in 0..20 {
            let img = image(3, seed);
            let back = stats
                .denormalize_image(&stats.normalize_image(&img).unwrap())
                .unwrap();
            for (a, b) in img.data().iter().zip(back.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn cifar10_preset() {
        let s = DatasetStats::cifar10();
        assert_eq!(s.mean, vec![0.491, 0.482, 0.447]);
        assert_eq!(s.std, vec![0.247, 0.244, 0.262]);
    }

    #[test]
    fn zero_std_is_rejected() {
        assert!(matches!(
            DatasetStats::new(vec![0.0], vec![0.0]),
            Err(Error::Numeric(_))
        ));
        let bad = DatasetStats {
            mean: vec![0.0],
            std: vec![0.0],
        };
        assert!(bad.normalize_image(&image(1, 0)).is_err());
    }

    #[test]
    fn stats_from_samples() {
        let mk = |v: f32| ImageSample {
            image: Tensor::full(&[1, 2, 2], v),
            label: 0,
            mask: None,
        };
        let s = DatasetStats::from_samples(&[mk(0.0), mk(1.0)]).unwrap();
        assert!((s.mean[0] - 0.5).abs() < 1e-7);
        assert!((s.std[0] - 0.5).abs() < 1e-7);
    }

    #[test]
    fn seed_streams_differ() {
        assert_ne!(derive_seed(0, 1, 0), derive_seed(0, 2, 0));
        assert_ne!(derive_seed(0, 1, 0), derive_seed(0, 1, 1));
        assert_eq!(derive_seed(5, 1, 7), derive_seed(5, 1, 7));
    }
}
