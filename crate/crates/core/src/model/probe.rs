use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelBundle;
use crate::error::{Error, Result};
use crate::losses::ce_loss;
use crate::nn::{OptimizerState, ParamSet, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.1,
            momentum: 0.9,
            batch_size: 128,
            seed: 0,
        }
    }
}

/// Fit a linear classifier on frozen pooled features `[n, C]`.
///
/// Features are standardized per channel while fitting and the scaling is
/// folded back into the weights, so the returned probe acts on raw pooled
/// features.
pub fn train_probe(bundle: &ModelBundle, features: &Tensor, labels: &[usize], cfg: &ProbeConfig) -> Result<ParamSet> {
    if !bundle.is_contrastive() {
        return Err(Error::contract("only contrastive bundles take a probe"));
    }
    let c = bundle.spec.channels();
    if features.rank() != 2 || features.shape()[1] != c || features.shape()[0] != labels.len() {
        return Err(Error::dim(format!(
            "probe features {:?} for {} labels and {c} channels",
            features.shape(),
            labels.len()
        )));
    }
    if labels.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Config("probe needs samples and a positive batch size".into()));
    }
    if let Some(l) = labels.iter().find(|l| **l >= bundle.classes) {
        return Err(Error::contract(format!("label {l} with {} classes", bundle.classes)));
    }
    let n = labels.len();
    let (mean, std) = column_stats(features);
    let mut z = features.clone();
    for i in 0..n {
        for (j, v) in z.outer_mut(i).iter_mut().enumerate() {
            *v = (*v - mean[j]) / std[j];
        }
    }

    let p = bundle.classes;
    let mut params = ParamSet::new();
    params.insert("probe.w", Tensor::zeros(&[p, c]));
    params.insert("probe.b", Tensor::zeros(&[p]));
    let mut opt = OptimizerState::new(cfg.lr, cfg.momentum, 0.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let rows: Vec<f32> = chunk.iter().flat_map(|&i| z.outer(i).iter().copied()).collect();
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let w = tape.leaf(params.get("probe.w")?.clone());
            let b = tape.leaf(params.get("probe.b")?.clone());
            let x = tape.constant(Tensor::new(vec![chunk.len(), c], rows)?);
            let logits = tape.linear(x, w, Some(b))?;
            let probs = tape.softmax(logits)?;
            let loss = ce_loss(&mut tape, probs, &batch_labels)?;
            let mut g = tape.backward(loss)?;
            opt.sgd_step(&mut params, &[g.take(w), g.take(b)])?;
        }
    }

    // logits = W (x - mu) / sigma + b = (W / sigma) x + (b - W mu / sigma)
    let w = params.get("probe.w")?.clone();
    let mut folded_w = w.clone();
    let mut folded_b = params.get("probe.b")?.clone();
    for k in 0..p {
        let row = w.outer(k);
        let shift: f32 = row.iter().zip(&mean).zip(&std).map(|((w, m), s)| w * m / s).sum();
        folded_b.data_mut()[k] -= shift;
        for (j, v) in folded_w.outer_mut(k).iter_mut().enumerate() {
            *v /= std[j];
        }
    }
    let mut probe = ParamSet::new();
    probe.insert("probe.w", folded_w);
    probe.insert("probe.b", folded_b);
    Ok(probe)
}

fn column_stats(x: &Tensor) -> (Vec<f32>, Vec<f32>) {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let mut mean = vec![0.0f64; c];
    let mut sq = vec![0.0f64; c];
    for i in 0..n {
        for (j, &v) in x.outer(i).iter().enumerate() {
            mean[j] += v as f64;
            sq[j] += (v as f64) * (v as f64);
        }
    }
    let std = mean
        .iter()
        .zip(&sq)
        .map(|(s, q)| {
            let m = s / n as f64;
            let var = (q / n as f64 - m * m).max(0.0);
            if var > 1e-12 {
                var.sqrt() as f32
            } else {
                1.0
            }
        })
        .collect();
    (mean.into_iter().map(|m| (m / n as f64) as f32).collect(), std)
}
