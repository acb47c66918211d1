use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explain::Explanation;
use crate::nn::Tensor;

pub const SSIM_WINDOW: usize = 8;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// A metric value with a flag for degenerate inputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub value: f32,
    pub flagged: bool,
}

impl Scored {
    pub fn ok(value: f32) -> Self {
        Self { value, flagged: false }
    }

    pub fn flagged(value: f32) -> Self {
        Self { value, flagged: true }
    }
}

/// Mean SSIM over all 8x8 windows (stride 1, uniform weights, population
/// moments). Maps smaller than the window use one window of their own size.
pub fn ssim(a: &[f32], b: &[f32], h: usize, w: usize) -> Result<f32> {
    if a.len() != h * w || b.len() != h * w {
        return Err(Error::dim(format!("ssim of {} and {} values on {h}x{w}", a.len(), b.len())));
    }
    if h == 0 || w == 0 {
        return Err(Error::dim("ssim of an empty map"));
    }
    let (wh, ww) = (SSIM_WINDOW.min(h), SSIM_WINDOW.min(w));
    let n = (wh * ww) as f64;
    let mut total = 0.0f64;
    let mut count = 0usize;
    for y0 in 0..=h - wh {
        for x0 in 0..=w - ww {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + wh {
                for x in x0..x0 + ww {
                    let (p, q) = (a[y * w + x] as f64, b[y * w + x] as f64);
                    sa += p;
                    sb += q;
                    saa += p * p;
                    sbb += q * q;
                    sab += p * q;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = saa / n - ma * ma;
            let vb = sbb / n - mb * mb;
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            count += 1;
        }
    }
    Ok((total / count as f64) as f32)
}

fn ssim_of(a: &Explanation, b: &Explanation) -> Result<Scored> {
    if a.saliency.shape() != b.saliency.shape() {
        return Err(Error::dim("explanations of different sizes"));
    }
    let value = ssim(a.values(), b.values(), a.height(), a.width())?;
    Ok(Scored {
        value,
        flagged: a.meta.degenerate || b.meta.degenerate,
    })
}

/// SSIM between the explanation of `image` and of `image + N(0, sigma^2)`,
/// both in normalized space. `explain` must hold the class fixed.
pub fn continuity(
    explain: impl Fn(&Tensor) -> Result<Explanation>,
    image: &Tensor,
    sigma: f32,
    seed: u64,
) -> Result<Scored> {
    if !(sigma >= 0.0) {
        return Err(Error::Config(format!("noise sigma {sigma} must be >= 0")));
    }
    let clean = explain(image)?;
    let mut noisy = image.clone();
    if sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0f32, sigma).map_err(|e| Error::Config(e.to_string()))?;
        noisy.data_mut().iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    }
    let perturbed = explain(&noisy)?;
    ssim_of(&clean, &perturbed)
}

/// SSIM between Grad-CAM for `class` and for a class drawn uniformly from
/// the other `classes - 1`. Returns the score and the drawn class.
pub fn contrastivity(
    explain_class: impl Fn(usize) -> Result<Explanation>,
    class: usize,
    classes: usize,
    rng: &mut impl Rng,
) -> Result<(Scored, usize)> {
    if classes < 2 {
        return Err(Error::contract("contrastivity needs at least two classes"));
    }
    if class >= classes {
        return Err(Error::contract(format!("class {class} with {classes} classes")));
    }
    let mut other = rng.random_range(0..classes - 1);
    if other >= class {
        other += 1;
    }
    let score = ssim_of(&explain_class(class)?, &explain_class(other)?)?;
    Ok((score, other))
}
