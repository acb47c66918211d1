//! Saliency-map quality metrics.

mod faithfulness;
mod mask;
mod report;
mod similarity;

pub use faithfulness::{auc_trapezoid, pixel_flipping, Baseline, PfCurve, PfOutcome, RemovalSchedule};
pub use mask::SegmentationMask;
pub use report::{Aggregate, MetricKind, MetricReport, SampleRecord};
pub use similarity::{continuity, contrastivity, ssim, Scored, SSIM_C1, SSIM_C2, SSIM_WINDOW};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Anything that maps a normalized image batch `[n, c, h, w]` to class
/// probabilities `[n, p]`.
pub trait Classifier {
    fn num_classes(&self) -> usize;
    fn probabilities(&self, images: &Tensor) -> Result<Tensor>;
}

fn check_mask(e: &[f32], mask: &SegmentationMask) -> Result<()> {
    if e.len() != mask.height() * mask.width() {
        return Err(Error::dim(format!(
            "explanation of {} values against a {}x{} mask",
            e.len(),
            mask.height(),
            mask.width()
        )));
    }
    Ok(())
}

/// Index of the largest value, first in raster order on ties.
pub fn raster_argmax(e: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in e.iter().enumerate() {
        if *v > e[best] {
            best = i;
        }
    }
    best
}

/// 1 when the top pixel of `e` lies in the mask; `None` for an empty mask.
pub fn pointing_game(e: &[f32], mask: &SegmentationMask) -> Result<Option<f32>> {
    check_mask(e, mask)?;
    if mask.is_empty() || e.is_empty() {
        return Ok(None);
    }
    Ok(Some(if mask.data()[raster_argmax(e)] != 0 { 1.0 } else { 0.0 }))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LocalizationMode {
    /// Share of attribution mass inside the mask.
    #[default]
    Mass,
    /// Share of positively attributed pixels inside the mask.
    Count,
}

/// Attribution localization; `None` for an empty mask, flagged 0 when `e`
/// carries no attribution.
pub fn attribution_localization(e: &[f32], mask: &SegmentationMask, mode: LocalizationMode) -> Result<Option<Scored>> {
    check_mask(e, mask)?;
    if mask.is_empty() {
        return Ok(None);
    }
    if e.iter().any(|v| *v < 0.0) {
        return Err(Error::contract("attribution localization needs e >= 0"));
    }
    let weight = |v: f32| -> f64 {
        match mode {
            LocalizationMode::Mass => v as f64,
            LocalizationMode::Count => (v > 0.0) as u8 as f64,
        }
    };
    let total: f64 = e.iter().map(|&v| weight(v)).sum();
    if total == 0.0 {
        return Ok(Some(Scored::flagged(0.0)));
    }
    let inside: f64 = e
        .iter()
        .zip(mask.data())
        .filter(|(_, m)| **m != 0)
        .map(|(&v, _)| weight(v))
        .sum();
    Ok(Some(Scored::ok((inside / total) as f32)))
}

fn mass(e: &[f32]) -> Result<Option<f64>> {
    if e.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::contract("explanation values must be finite and >= 0"));
    }
    let total: f64 = e.iter().map(|&v| v as f64).sum();
    Ok((total > 0.0).then_some(total))
}

/// Shannon entropy of `e / sum(e)`; `None` for an all-zero map.
pub fn complexity_entropy(e: &[f32]) -> Result<Option<f32>> {
    let Some(total) = mass(e)? else { return Ok(None) };
    let h: f64 = e
        .iter()
        .filter(|v| **v > 0.0)
        .map(|&v| {
            let p = v as f64 / total;
            -p * p.ln()
        })
        .sum();
    Ok(Some(h as f32))
}

/// Gini index of the attribution vector; `None` for an all-zero map.
pub fn sparseness_gini(e: &[f32]) -> Result<Option<f32>> {
    let Some(total) = mass(e)? else { return Ok(None) };
    let mut v: Vec<f64> = e.iter().map(|&x| x as f64).collect();
    v.sort_by(f64::total_cmp);
    let d = v.len() as f64;
    let weighted: f64 = v
        .iter()
        .enumerate()
        .map(|(j, x)| (2.0 * (j + 1) as f64 - d - 1.0) * x)
        .sum();
    Ok(Some((weighted / (d * total)) as f32))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(bits: &[u8], w: usize) -> SegmentationMask {
        SegmentationMask::new(bits.len() / w, w, bits.to_vec()).unwrap()
    }

    #[test]
    fn pointing_game_examples() {
        let m = mask(&[1, 1, 0, 0], 2);
        assert_eq!(pointing_game(&[0.1, 0.9, 0.2, 0.3], &m).unwrap(), Some(1.0));
        assert_eq!(pointing_game(&[0.1, 0.2, 0.2, 0.9], &m).unwrap(), Some(0.0));
        let corner = mask(&[1, 0, 0, 0], 2);
        assert_eq!(pointing_game(&[0.5; 4], &corner).unwrap(), Some(1.0));
        assert_eq!(pointing_game(&[0.5; 4], &mask(&[0; 4], 2)).unwrap(), None);
    }

    #[test]
    fn localization_examples() {
        let m = mask(&[1, 1, 0, 0], 2);
        let inside = attribution_localization(&[0.4, 0.6, 0.0, 0.0], &m, LocalizationMode::Mass)
            .unwrap()
            .unwrap();
        assert_eq!(inside.value, 1.0);
        let half = attribution_localization(&[0.3; 4], &m, LocalizationMode::Mass).unwrap().unwrap();
        assert_eq!(half.value, 0.5);
        let zero = attribution_localization(&[0.0; 4], &m, LocalizationMode::Mass).unwrap().unwrap();
        assert!(zero.flagged && zero.value == 0.0);
        let count = attribution_localization(&[0.9, 0.0, 0.1, 0.0], &m, LocalizationMode::Count)
            .unwrap()
            .unwrap();
        assert_eq!(count.value, 0.5);
        assert!(attribution_localization(&[0.0; 3], &m, LocalizationMode::Mass).is_err());
    }

    #[test]
    fn entropy_and_gini_extremes() {
        assert!((complexity_entropy(&[0.25; 4]).unwrap().unwrap() - 4f32.ln()).abs() < 1e-6);
        assert_eq!(complexity_entropy(&[0.0, 1.0, 0.0]).unwrap(), Some(0.0));
        assert_eq!(complexity_entropy(&[0.0; 3]).unwrap(), None);
        assert_eq!(sparseness_gini(&[0.7; 9]).unwrap(), Some(0.0));
        let one_hot = sparseness_gini(&[0.0, 0.0, 3.0, 0.0]).unwrap().unwrap();
        assert!((one_hot - 0.75).abs() < 1e-6);
    }
}
