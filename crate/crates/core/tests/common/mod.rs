//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

pub mod gradient_cases;
pub mod loss_oracles;
pub mod reference;

use reference::{Arr, Branches};

use camb::nn::{Tape, Tensor, Var};
use camb::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Outcome of a central finite-difference check.
#[derive(Debug)]
pub struct GradCheck {
    /// Norm-wise relative error per input: |analytic - numeric| / max(|analytic|, |numeric|).
    pub rel_errors: Vec<f64>,
    /// Coordinates skipped because the perturbation switched a ReLU, max-pool or hinge branch.
    pub skipped: usize,
    pub checked: usize,
}

impl GradCheck {
    pub fn worst(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Compare the tape's analytic gradients of `build` against central
/// differences (step `eps`) of the independent f64 `reference` forward.
pub fn grad_check<F, R>(inputs: &[Tensor], eps: f64, build: F, reference: R) -> GradCheck
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    R: Fn(&[Arr], &mut Branches) -> f64,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars).expect("forward");
    let grads = tape.backward(out).expect("backward");

    let base: Vec<Arr> = inputs.iter().map(Arr::from_f32).collect();
    let mut base_branches = Branches::default();
    let f0 = reference(&base, &mut base_branches);
    let implemented = f64::from(tape.value(out).item().unwrap());
    assert!(
        (f0 - implemented).abs() <= 1e-4 * f0.abs().max(1.0),
        "forward disagrees with reference: {implemented} vs {f0}"
    );

    let mut rel_errors = Vec::new();
    let (mut skipped, mut checked) = (0, 0);
    for (idx, var) in vars.iter().enumerate() {
        let analytic_t = grads.get(*var);
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for j in 0..inputs[idx].len() {
            let eval = |delta: f64| {
                let mut shifted = base.clone();
                shifted[idx].data[j] += delta;
                let mut br = Branches::default();
                (reference(&shifted, &mut br), br)
            };
            let (fp, bp) = eval(eps);
            let (fm, bm) = eval(-eps);
            if bp != base_branches || bm != base_branches {
                skipped += 1;
                continue;
            }
            checked += 1;
            numeric.push((fp - fm) / (2.0 * eps));
            analytic.push(f64::from(analytic_t.data()[j]));
        }
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
        let scale = norm(&analytic).max(norm(&numeric));
        rel_errors.push(if scale == 0.0 { 0.0 } else { norm(&diff) / scale });
    }
    GradCheck {
        rel_errors,
        skipped,
        checked,
    }
}

/// Fixed random weights used to reduce a tensor output to a scalar, so every
/// output element contributes to the checked gradient.
pub fn projection_weights(shape: &[usize], seed: u64) -> Tensor {
    random_tensor(&mut rng(seed ^ 0x9e37), shape, 1.0)
}

pub fn project_to_scalar(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(v).shape().to_vec();
    let w = tape.constant(projection_weights(&shape, seed));
    tape.dot(v, w)
}

pub fn project_reference(a: &Arr, seed: u64) -> f64 {
    reference::dot(a, &Arr::from_f32(&projection_weights(&a.shape, seed)))
}

// ---------------------------------------------------------------------------
// Loss oracles: straight from the definitions, f64, no max-subtraction.

pub fn naive_ce(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &y) in probs.iter().zip(labels) {
        for (c, &p) in row.iter().enumerate() {
            let onehot = if c == y { 1.0 } else { 0.0 };
            if onehot > 0.0 {
                total -= onehot * p.max(1e-12).ln();
            }
        }
    }
    total / probs.len() as f64
}

pub fn naive_scl(z: &[Vec<f64>], labels: &[usize], tau: f64) -> Option<f64> {
    let n = z.len();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut total = 0.0;
    let mut contributing = 0;
    for i in 0..n {
        let positives: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
        if positives.is_empty() {
            continue;
        }
        contributing += 1;
        let mut denom = 0.0;
        for a in 0..n {
            if a != i {
                denom += (dot(&z[i], &z[a]) / tau).exp();
            }
        }
        let mut inner = 0.0;
        for &j in &positives {
            inner += ((dot(&z[i], &z[j]) / tau).exp() / denom).ln();
        }
        total += -inner / positives.len() as f64;
    }
    (contributing > 0).then(|| total / contributing as f64)
}

pub fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn rows(t: &Tensor) -> Vec<Vec<f32>> {
    (0..t.shape()[0]).map(|i| t.outer(i).to_vec()).collect()
}

pub fn unit_rows(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * k);
    for _ in 0..n {
        let row: Vec<f32> = (0..k).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        data.extend(row.iter().map(|v| v / norm));
    }
    Tensor::new(vec![n, k], data).unwrap()
}
