use serde::{Deserialize, Serialize};

use super::Classifier;
use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Trapezoidal area under `ys`, divided by the x-range.
pub fn auc_trapezoid(xs: &[f32], ys: &[f32]) -> Result<f32> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::dim(format!("auc over {} xs and {} ys", xs.len(), ys.len())));
    }
    if xs.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::contract("auc xs must be strictly increasing"));
    }
    let area: f64 = xs
        .windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| 0.5 * (y[0] as f64 + y[1] as f64) * (x[1] as f64 - x[0] as f64))
        .sum();
    Ok((area / (xs[xs.len() - 1] as f64 - xs[0] as f64)) as f32)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    /// Per-channel dataset mean, i.e. 0 after normalization.
    #[default]
    DatasetMean,
    /// Raw black, i.e. `-mean/std` after normalization.
    Zero,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PfCurve {
    /// `f(x_j)_c`; lower area is more faithful.
    #[default]
    Probability,
    /// `f(x)_c - f(x_j)_c`.
    Difference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemovalSchedule {
    pub baseline: Baseline,
    /// Share of pixels removed per step; `1/(H*W)` or less means one pixel at a time.
    pub step_fraction: f32,
    pub curve: PfCurve,
}

impl Default for RemovalSchedule {
    fn default() -> Self {
        Self {
            baseline: Baseline::DatasetMean,
            step_fraction: 1.0 / 64.0,
            curve: PfCurve::Probability,
        }
    }
}

impl RemovalSchedule {
    pub fn per_pixel() -> Self {
        Self {
            step_fraction: 0.0,
            ..Self::default()
        }
    }

    /// Pixels removed per step for an image of `pixels` pixels.
    pub fn step_pixels(&self, pixels: usize) -> Result<usize> {
        if !(self.step_fraction >= 0.0 && self.step_fraction <= 1.0) {
            return Err(Error::Config(format!("step fraction {} outside [0,1]", self.step_fraction)));
        }
        Ok(((pixels as f64 * self.step_fraction as f64).ceil() as usize).clamp(1, pixels.max(1)))
    }

    /// Baseline value per channel in normalized space.
    pub fn baseline_values(&self, mean: &[f32], std: &[f32]) -> Vec<f32> {
        match self.baseline {
            Baseline::DatasetMean => vec![0.0; mean.len()],
            Baseline::Zero => mean.iter().zip(std).map(|(m, s)| -m / s).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PfOutcome {
    pub score: f32,
    /// Fraction removed and curve value per step, starting at 0.
    pub fractions: Vec<f32>,
    pub curve: Vec<f32>,
    /// The saliency was constant, so removal fell back to raster order.
    pub flagged: bool,
}

const PF_CHUNK: usize = 72;

/// Pixel flipping: remove pixels (all channels at once) in decreasing
/// saliency order, raster order on ties, and integrate the class curve.
pub fn pixel_flipping(
    model: &dyn Classifier,
    image: &Tensor,
    saliency: &[f32],
    class: usize,
    schedule: &RemovalSchedule,
    baseline: &[f32],
) -> Result<PfOutcome> {
    if image.rank() != 3 {
        return Err(Error::dim(format!("pixel flipping on image {:?}", image.shape())));
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let d = h * w;
    if saliency.len() != d || baseline.len() != c {
        return Err(Error::dim(format!(
            "{} saliency values and {} baseline channels for image {:?}",
            saliency.len(),
            baseline.len(),
            image.shape()
        )));
    }
    if class >= model.num_classes() {
        return Err(Error::contract(format!("class {class} with {} classes", model.num_classes())));
    }
    let flagged = saliency.iter().all(|v| *v == saliency[0]);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| saliency[b].total_cmp(&saliency[a]).then(a.cmp(&b)));

    let k = schedule.step_pixels(d)?;
    let steps = d.div_ceil(k);
    let mut current = image.clone();
    let mut variants = vec![current.clone()];
    let mut fractions = vec![0.0f32];
    for j in 1..=steps {
        for &p in &order[(j - 1) * k..(j * k).min(d)] {
            for (ch, b) in baseline.iter().enumerate() {
                current.data_mut()[ch * d + p] = *b;
            }
        }
        variants.push(current.clone());
        fractions.push((j * k).min(d) as f32 / d as f32);
    }
    let mut probs = Vec::with_capacity(variants.len());
    for chunk in variants.chunks(PF_CHUNK) {
        let batch = Tensor::stack(&chunk.iter().collect::<Vec<_>>())?;
        let out = model.probabilities(&batch)?;
        probs.extend((0..chunk.len()).map(|i| out.outer(i)[class]));
    }
    let curve: Vec<f32> = match schedule.curve {
        PfCurve::Probability => probs,
        PfCurve::Difference => probs.iter().map(|p| probs[0] - p).collect(),
    };
    Ok(PfOutcome {
        score: auc_trapezoid(&fractions, &curve)?,
        fractions,
        curve,
        flagged,
    })
}
