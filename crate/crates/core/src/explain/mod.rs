//! Grad-CAM and Eigen-CAM on the backbone tap point.

mod svd;

pub use svd::{svd, SvdResult};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FeatureMap, ModelBundle};
use crate::nn::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExplainerKind {
    GradCam,
    EigenCam,
}

impl ExplainerKind {
    pub const ALL: [ExplainerKind; 2] = [ExplainerKind::GradCam, ExplainerKind::EigenCam];

    pub fn name(self) -> &'static str {
        match self {
            ExplainerKind::GradCam => "grad-cam",
            ExplainerKind::EigenCam => "eigen-cam",
        }
    }
}

impl std::fmt::Display for ExplainerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ExplainerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grad-cam" => Ok(ExplainerKind::GradCam),
            "eigen-cam" => Ok(ExplainerKind::EigenCam),
            other => Err(Error::Config(format!("unknown explainer `{other}`"))),
        }
    }
}

/// How the Eigen-CAM map is read off the feature matrix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EigenCamMode {
    /// First left singular vector of the raw `hw x C` matrix.
    #[default]
    LeftSingular,
    /// Raw activations projected on the first right singular vector of the
    /// column-centred matrix.
    CenteredProjection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationMeta {
    pub explainer: ExplainerKind,
    /// Explained class, Grad-CAM only.
    pub class: Option<usize>,
    pub model_id: String,
    pub sample_id: Option<usize>,
    /// The raw map was constant, so the saliency is all zeros.
    pub degenerate: bool,
}

/// Image-sized saliency in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct Explanation {
    /// `[H, W]`.
    pub saliency: Tensor,
    pub meta: ExplanationMeta,
}

impl Explanation {
    pub fn height(&self) -> usize {
        self.saliency.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.saliency.shape()[1]
    }

    pub fn values(&self) -> &[f32] {
        self.saliency.data()
    }

    pub fn with_sample(mut self, id: usize) -> Self {
        self.meta.sample_id = Some(id);
        self
    }
}

/// Gradient of the explained logit at the tap point and its channel means.
#[derive(Clone, Debug, PartialEq)]
pub struct CamIntermediates {
    /// `[C, h, w]`.
    pub gradient: Tensor,
    pub alpha: Vec<f32>,
    pub class: usize,
}

/// Bilinear resize with half-pixel centres (`align_corners = false`).
pub fn bilinear_upscale(map: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    assert!(h >= 1 && w >= 1 && map.len() == h * w, "bilinear_upscale: bad input size");
    let axis = |dst: usize, src_len: usize, dst_len: usize| -> (usize, usize, f32) {
        let scale = src_len as f32 / dst_len as f32;
        let pos = ((dst as f32 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (pos.floor() as usize).min(src_len - 1);
        let i1 = (i0 + 1).min(src_len - 1);
        (i0, i1, pos - i0 as f32)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = axis(y, h, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = axis(x, w, out_w);
            let top = map[y0 * w + x0] * (1.0 - fx) + map[y0 * w + x1] * fx;
            let bottom = map[y1 * w + x0] * (1.0 - fx) + map[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// `(v - min) / (max - min)`. A map whose range is negligible against its
/// magnitude counts as constant and comes back as zeros with the flag set.
pub fn minmax_normalize(map: &[f32]) -> (Vec<f32>, bool) {
    let (lo, hi) = map
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if map.is_empty() || !(range > 1e-6 * lo.abs().max(hi.abs())) {
        return (vec![0.0; map.len()], true);
    }
    let out = map.iter().map(|v| ((v - lo) / range).clamp(0.0, 1.0)).collect();
    (out, false)
}

fn finish(raw: &[f32], h: usize, w: usize, out: (usize, usize), meta: ExplanationMeta) -> Result<Explanation> {
    let up = bilinear_upscale(raw, h, w, out.0, out.1);
    let (values, degenerate) = minmax_normalize(&up);
    Ok(Explanation {
        saliency: Tensor::new(vec![out.0, out.1], values)?,
        meta: ExplanationMeta { degenerate, ..meta },
    })
}

/// `ReLU((1/C) sum_l alpha_l A_l)` on the `h x w` grid, with `alpha_l` the
/// spatial mean of the gradient in channel `l`.
pub fn grad_cam_map(features: &FeatureMap, gradient: &Tensor) -> Result<(Vec<f32>, Vec<f32>)> {
    if gradient.shape() != features.0.shape() {
        return Err(Error::dim(format!(
            "gradient {:?} for feature map {:?}",
            gradient.shape(),
            features.0.shape()
        )));
    }
    let (c, plane) = (features.channels(), features.height() * features.width());
    let alpha: Vec<f32> = gradient
        .data()
        .chunks(plane)
        .map(|g| (g.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32)
        .collect();
    let mut raw = vec![0.0f64; plane];
    for (l, a) in features.0.data().chunks(plane).enumerate() {
        for (r, v) in raw.iter_mut().zip(a) {
            *r += alpha[l] as f64 * *v as f64;
        }
    }
    let raw = raw.into_iter().map(|v| ((v / c as f64) as f32).max(0.0)).collect();
    Ok((raw, alpha))
}

/// Gradient of logit `class` (or the predicted class) with respect to the
/// feature map, through `logits` applied to the map.
pub fn tap_gradient(
    features: &FeatureMap,
    class: Option<usize>,
    logits: impl FnOnce(&mut Tape, Var) -> Result<Var>,
) -> Result<CamIntermediates> {
    let mut tape = Tape::new();
    let shape: Vec<usize> = std::iter::once(1).chain(features.0.shape().iter().copied()).collect();
    let a = tape.leaf(features.0.clone().reshape(&shape)?);
    let out = logits(&mut tape, a)?;
    let values = tape.value(out).data().to_vec();
    let class = match class {
        Some(c) if c < values.len() => c,
        Some(c) => return Err(Error::contract(format!("class {c} with {} logits", values.len()))),
        None => argmax(&values),
    };
    let picked = tape.select(out, class)?;
    let grads = tape.backward(picked)?;
    let gradient = grads.get(a).reshape(features.0.shape())?;
    let plane = features.height() * features.width();
    let alpha = gradient
        .data()
        .chunks(plane)
        .map(|g| (g.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32)
        .collect();
    Ok(CamIntermediates { gradient, alpha, class })
}

fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Grad-CAM for a normalized `[c, H, W]` image. Contrastive bundles go
/// through their probe; `class = None` explains the predicted class.
pub fn grad_cam(bundle: &ModelBundle, image: &Tensor, class: Option<usize>) -> Result<(Explanation, CamIntermediates)> {
    if bundle.is_contrastive() && bundle.probe.is_none() {
        return Err(Error::MissingProbe);
    }
    let features = bundle.forward_features(image)?;
    let inter = tap_gradient(&features, class, |tape, a| {
        let pooled = tape.global_avg_pool(a)?;
        bundle.logits_on(tape, None, pooled)
    })?;
    let (raw, _) = grad_cam_map(&features, &inter.gradient)?;
    let meta = ExplanationMeta {
        explainer: ExplainerKind::GradCam,
        class: Some(inter.class),
        model_id: bundle.id.clone(),
        sample_id: None,
        degenerate: false,
    };
    let size = (image.shape()[1], image.shape()[2]);
    let e = finish(&raw, features.height(), features.width(), size, meta)?;
    Ok((e, inter))
}

/// The `hw x C` matrix with rows in raster order.
pub fn feature_matrix(features: &FeatureMap) -> Vec<f64> {
    let (c, plane) = (features.channels(), features.height() * features.width());
    let data = features.0.data();
    let mut out = vec![0.0; plane * c];
    for l in 0..c {
        for p in 0..plane {
            out[p * c + l] = data[l * plane + p] as f64;
        }
    }
    out
}

/// Flip `v` so its largest-magnitude entry (first on ties) is positive.
pub fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|x| *x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Raw `h x w` Eigen-CAM map; `None` when the feature map has rank 0.
pub fn eigen_cam_map(features: &FeatureMap, mode: EigenCamMode) -> Option<Vec<f64>> {
    let (c, plane) = (features.channels(), features.height() * features.width());
    let m = feature_matrix(features);
    let mut map = match mode {
        EigenCamMode::LeftSingular => {
            let r = svd(&m, plane, c);
            (r.rank() > 0).then(|| r.left(0))?
        }
        EigenCamMode::CenteredProjection => {
            let mut centred = m.clone();
            for l in 0..c {
                let mean = (0..plane).map(|p| m[p * c + l]).sum::<f64>() / plane as f64;
                (0..plane).for_each(|p| centred[p * c + l] -= mean);
            }
            let r = svd(&centred, plane, c);
            if r.rank() == 0 {
                return None;
            }
            let v = r.right(0);
            (0..plane)
                .map(|p| (0..c).map(|l| m[p * c + l] * v[l]).sum())
                .collect()
        }
    };
    fix_sign(&mut map);
    Some(map)
}

/// Eigen-CAM for a normalized `[c, H, W]` image; needs no gradients or probe.
pub fn eigen_cam(bundle: &ModelBundle, image: &Tensor, mode: EigenCamMode) -> Result<Explanation> {
    let features = bundle.forward_features(image)?;
    let meta = ExplanationMeta {
        explainer: ExplainerKind::EigenCam,
        class: None,
        model_id: bundle.id.clone(),
        sample_id: None,
        degenerate: false,
    };
    let raw: Vec<f32> = match eigen_cam_map(&features, mode) {
        Some(map) => map.into_iter().map(|v| v as f32).collect(),
        None => vec![0.0; features.height() * features.width()],
    };
    finish(&raw, features.height(), features.width(), (image.shape()[1], image.shape()[2]), meta)
}
