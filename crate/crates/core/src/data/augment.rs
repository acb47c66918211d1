use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ImageSample;
use crate::error::{Error, Result};
use crate::metrics::SegmentationMask;
use crate::nn::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorJitter {
    /// Brightness, contrast and saturation factors are drawn from `[1-s, 1+s]`.
    pub strength: f32,
    pub p: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blur {
    pub sigma_min: f32,
    pub sigma_max: f32,
    pub p: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub crop_padding: Option<usize>,
    pub hflip_p: f32,
    pub color_jitter: Option<ColorJitter>,
    pub grayscale_p: f32,
    pub blur: Option<Blur>,
}

impl AugmentationPolicy {
    pub fn identity() -> Self {
        Self {
            crop_padding: None,
            hflip_p: 0.0,
            color_jitter: None,
            grayscale_p: 0.0,
            blur: None,
        }
    }

    /// Padded crop and horizontal flip.
    pub fn standard() -> Self {
        Self {
            crop_padding: Some(4),
            hflip_p: 0.5,
            ..Self::identity()
        }
    }

    /// Standard geometry plus colour jitter and grayscale.
    pub fn contrastive() -> Self {
        Self {
            color_jitter: Some(ColorJitter { strength: 0.4, p: 0.8 }),
            grayscale_p: 0.2,
            ..Self::standard()
        }
    }

    /// The heavier colour policy, with blur.
    pub fn strong() -> Self {
        Self {
            color_jitter: Some(ColorJitter { strength: 0.8, p: 0.8 }),
            grayscale_p: 0.2,
            blur: Some(Blur {
                sigma_min: 0.1,
                sigma_max: 2.0,
                p: 0.5,
            }),
            ..Self::standard()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut probs = vec![self.hflip_p, self.grayscale_p];
        if let Some(j) = self.color_jitter {
            probs.push(j.p);
            if !(0.0..=1.0).contains(&j.strength) {
                return Err(Error::Config(format!("jitter strength {} outside [0,1]", j.strength)));
            }
        }
        if let Some(b) = self.blur {
            probs.push(b.p);
            if !(b.sigma_min > 0.0 && b.sigma_min <= b.sigma_max) {
                return Err(Error::Config("blur sigma range is empty".into()));
            }
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Config(format!("probability {p} outside [0,1]")));
        }
        Ok(())
    }
}

/// Apply `policy` to an unnormalized sample. Geometric steps move the mask with the image.
pub fn augment(sample: &ImageSample, policy: &AugmentationPolicy, rng: &mut impl Rng) -> Result<ImageSample> {
    policy.validate()?;
    let mut out = sample.clone();
    if let Some(pad) = policy.crop_padding {
        let dy = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let dx = rng.random_range(0..=2 * pad) as isize - pad as isize;
        shift(&mut out, dy, dx);
    }
    if policy.hflip_p > 0.0 && rng.random::<f32>() < policy.hflip_p {
        hflip(&mut out);
    }
    let mut touched = false;
    if let Some(j) = policy.color_jitter {
        if rng.random::<f32>() < j.p {
            let lo = (1.0 - j.strength).max(0.0);
            let hi = 1.0 + j.strength;
            let b = rng.random_range(lo..=hi);
            let c = rng.random_range(lo..=hi);
            let s = rng.random_range(lo..=hi);
            jitter(&mut out.image, b, c, s);
            touched = true;
        }
    }
    if policy.grayscale_p > 0.0 && rng.random::<f32>() < policy.grayscale_p {
        grayscale(&mut out.image);
        touched = true;
    }
    if let Some(bl) = policy.blur {
        if rng.random::<f32>() < bl.p {
            let sigma = rng.random_range(bl.sigma_min..=bl.sigma_max);
            gaussian_blur(&mut out.image, sigma);
            touched = true;
        }
    }
    if touched {
        out.image.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
    Ok(out)
}

/// Translate by `(dy, dx)` with zero fill, i.e. a crop of the zero-padded image.
fn shift(sample: &mut ImageSample, dy: isize, dx: isize) {
    if dy == 0 && dx == 0 {
        return;
    }
    let (c, h, w) = (sample.channels(), sample.height(), sample.width());
    let src = |y: usize, x: usize| -> Option<(usize, usize)> {
        let sy = y as isize - dy;
        let sx = x as isize - dx;
        (sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w).then_some((sy as usize, sx as usize))
    };
    let old = sample.image.data().to_vec();
    let data = sample.image.data_mut();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                data[(ch * h + y) * w + x] = src(y, x).map_or(0.0, |(sy, sx)| old[(ch * h + sy) * w + sx]);
            }
        }
    }
    if let Some(m) = &sample.mask {
        sample.mask = Some(SegmentationMask::from_fn(h, w, |y, x| {
            src(y, x).is_some_and(|(sy, sx)| m.get(sy, sx))
        }));
    }
}

fn hflip(sample: &mut ImageSample) {
    let w = sample.width();
    for row in sample.image.data_mut().chunks_mut(w) {
        row.reverse();
    }
    if let Some(m) = &sample.mask {
        sample.mask = Some(SegmentationMask::from_fn(m.height(), w, |y, x| m.get(y, w - 1 - x)));
    }
}

fn plane_gray(image: &Tensor) -> Vec<f32> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let d = image.data();
    let plane = h * w;
    (0..plane)
        .map(|i| {
            if c == 3 {
                0.299 * d[i] + 0.587 * d[plane + i] + 0.114 * d[2 * plane + i]
            } else {
                (0..c).map(|ch| d[ch * plane + i]).sum::<f32>() / c as f32
            }
        })
        .collect()
}

fn jitter(image: &mut Tensor, brightness: f32, contrast: f32, saturation: f32) {
    let plane = image.shape()[1] * image.shape()[2];
    image
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = (*v * brightness).clamp(0.0, 1.0));
    let mean = plane_gray(image).iter().sum::<f32>() / plane as f32;
    image
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = ((*v - mean) * contrast + mean).clamp(0.0, 1.0));
    let gray = plane_gray(image);
    for chunk in image.data_mut().chunks_mut(plane) {
        for (v, g) in chunk.iter_mut().zip(&gray) {
            *v = ((*v - g) * saturation + g).clamp(0.0, 1.0);
        }
    }
}

fn grayscale(image: &mut Tensor) {
    let plane = image.shape()[1] * image.shape()[2];
    let gray = plane_gray(image);
    for chunk in image.data_mut().chunks_mut(plane) {
        chunk.copy_from_slice(&gray);
    }
}

fn gaussian_blur(image: &mut Tensor, sigma: f32) {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    for chunk in image.data_mut().chunks_mut(h * w) {
        let src = chunk.to_vec();
        let mut tmp = vec![0.0f32; h * w];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * src[y * w + clamp(x as isize + k as isize - radius, w)])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                chunk[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * tmp[clamp(y as isize + k as isize - radius, h) * w + x])
                    .sum();
            }
        }
    }
}
