//! Finite-difference gradient cases, one per differentiable op or loss.
//! Each pairs a tape construction with an f64 reference of the same function.

use camb::losses::{self, LabeledBatch, SclConfig, TripletConfig};
use camb::nn::Tensor;
use rand::Rng;

use super::reference::{self as r, Arr};
use super::{grad_check, project_reference, project_to_scalar, random_tensor, rng, GradCheck};

pub const EPS: f64 = 1e-3;

pub type Case = (&'static str, fn(u64) -> GradCheck);

pub fn cases() -> Vec<Case> {
    vec![
        ("conv2d", conv2d),
        ("relu", relu),
        ("max_pool2d", max_pool),
        ("global_avg_pool", gap),
        ("linear", linear),
        ("softmax", softmax),
        ("l2_normalize", l2_normalize),
        ("add", add),
        ("mul", mul),
        ("scale", scale),
        ("dot", dot),
        ("log", log),
        ("exp", exp),
        ("sum", sum),
        ("mean", mean),
        ("select", select),
        ("ce_loss", ce),
        ("scl_loss", scl),
        ("triplet_loss", triplet),
        ("conv_net", conv_net),
    ]
}

fn conv2d(seed: u64) -> GradCheck {
    let mut g = rng(seed);
    let stride = g.random_range(1..=2);
    let pad = g.random_range(0..=1);
    let inputs = vec![
        random_tensor(&mut g, &[2, 2, 5, 5], 1.0),
        random_tensor(&mut g, &[3, 2, 3, 3], 0.5),
        random_tensor(&mut g, &[3], 0.5),
    ];
    grad_check(
        &inputs,
        EPS,
        |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
            project_to_scalar(t, y, seed)
        },
        |a, _| project_reference(&r::conv2d(&a[0], &a[1], &a[2], stride, pad), seed),
    )
}

fn away_from_zero(g: &mut impl Rng, n: usize) -> Tensor {
    Tensor::from_vec(
        (0..n)
            .map(|_| {
                let m = g.random_range(0.05f32..2.0);
                if g.random_bool(0.5) { m } else { -m }
            })
            .collect(),
    )
}

fn relu(seed: u64) -> GradCheck {
    let mut g = rng(seed);
    let x = away_from_zero(&mut g, 12);
    grad_check(
        &[x],
        EPS,
        |t, v| {
            let y = t.relu(v[0])?;
            project_to_scalar(t, y, seed)
        },
        |a, br| project_reference(&r::relu(&a[0], br), seed),
    )
}

fn max_pool(seed: u64) -> GradCheck {
    let mut g = rng(seed);
    let x = random_tensor(&mut g, &[1, 2, 4, 6], 1.0);
    grad_check(
        &[x],
        EPS,
        |t, v| {
            let y = t.max_pool2d(v[0], 2)?;
            project_to_scalar(t, y, seed)
        },
        |a, br| project_reference(&r::max_pool(&a[0], 2, br), seed),
    )
}

fn gap(seed: u64) -> GradCheck {
    let mut g = rng(seed);
    let x = random_tensor(&mut g, &[2, 3, 3, 4], 1.0);
    grad_check(
        &[x],
        EPS,
        |t, v| {
            let y = t.global_avg_pool(v[0])?;
            project_to_scalar(t, y, seed)
        },
        |a, _| project_reference(&r::gap(&a[0]), seed),
    )
}

fn linear(seed: u64) -> GradCheck {
    let mut g = rng(seed);
    let inputs = vec![
        random_tensor(&mut g, &[3, 4], 1.0),
        random_tensor(&mut g, &[5, 4], 1.0),
        random_tensor(&mut g, &[5], 1.0),
    ];
    grad_check(
        &inputs,
        EPS,
        |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            project_to_scalar(t, y, seed)
        },
        |a, _| project_reference(&r::linear(&a[0], &a[1], &a[2]), seed),
    )
}

fn softmax(seed: u64) -> GradCheck {
    let mut g = rng(seed);
    let x = random_tensor(&mut g, &[3, 5], 2.0);
    grad_check(
        &[x],
        EPS,
        |t, v| {
            let y = t.softmax(v[0])?;
            project_to_scalar(t, y, seed)
        },
        |a, _| project_reference(&r::softmax(&a[0]), seed),
    )
}

fn l2_normalize(seed: u64) -> GradCheck {
    let mut g = rng(seed);
    let x = random_tensor(&mut g, &[3, 4], 1.0);
    grad_check(
        &[x],
        EPS,
        |t, v| {
            let y = t.l2_normalize(v[0])?;
            project_to_scalar(t, y, seed)
        },
        |a, _| project_reference(&r::l2_normalize(&a[0]), seed),
    )
}

fn pair(seed: u64) -> Vec<Tensor> {
    let mut g = rng(seed);
    vec![random_tensor(&mut g, &[2, 3], 1.0), random_tensor(&mut g, &[2, 3], 1.0)]
}

fn add(seed: u64) -> GradCheck {
    grad_check(
        &pair(seed),
        EPS,
        |t, v| {
            let y = t.add(v[0], v[1])?;
            let z = t.mul(y, y)?;
            project_to_scalar(t, z, seed)
        },
        |a, _| {
            let y = r::zip(&a[0], &a[1], |x, y| x + y);
            project_reference(&r::zip(&y, &y, |x, y| x * y), seed)
        },
    )
}

fn mul(seed: u64) -> GradCheck {
    grad_check(
        &pair(seed),
        EPS,
        |t, v| {
            let y = t.mul(v[0], v[1])?;
            project_to_scalar(t, y, seed)
        },
        |a, _| project_reference(&r::zip(&a[0], &a[1], |x, y| x * y), seed),
    )
}

fn scale(seed: u64) -> GradCheck {
    let mut g = rng(seed);
    let f = g.random_range(-3.0f32..3.0);
    let x = random_tensor(&mut g, &[4], 1.0);
    grad_check(
        &[x],
        EPS,
        |t, v| {
            let y = t.scale(v[0], f)?;
            project_to_scalar(t, y, seed)
        },
        |a, _| project_reference(&r::scale(&a[0], f64::from(f)), seed),
    )
}

fn dot(seed: u64) -> GradCheck {
    let mut g = rng(seed);
    let inputs = vec![random_tensor(&mut g, &[6], 1.0), random_tensor(&mut g, &[6], 1.0)];
    grad_check(&inputs, EPS, |t, v| t.dot(v[0], v[1]), |a, _| r::dot(&a[0], &a[1]))
}

fn log(seed: u64) -> GradCheck {
    let mut g = rng(seed);
    let x = Tensor::from_vec((0..5).map(|_| g.random_range(0.5f32..2.0)).collect());
    grad_check(
        &[x],
        EPS,
        |t, v| {
            let y = t.log(v[0])?;
            project_to_scalar(t, y, seed)
        },
        |a, _| project_reference(&r::log(&a[0]), seed),
    )
}

fn exp(seed: u64) -> GradCheck {
    let mut g = rng(seed);
    let x = random_tensor(&mut g, &[5], 1.5);
    grad_check(
        &[x],
        EPS,
        |t, v| {
            let y = t.exp(v[0])?;
            project_to_scalar(t, y, seed)
        },
        |a, _| project_reference(&r::exp(&a[0]), seed),
    )
}

fn sum(seed: u64) -> GradCheck {
    let mut g = rng(seed);
    let x = random_tensor(&mut g, &[2, 4], 1.0);
    grad_check(
        &[x],
        EPS,
        |t, v| {
            let y = t.mul(v[0], v[0])?;
            t.sum(y)
        },
        |a, _| a[0].data.iter().map(|v| v * v).sum(),
    )
}

fn mean(seed: u64) -> GradCheck {
    let mut g = rng(seed);
    let x = random_tensor(&mut g, &[2, 4], 1.0);
    grad_check(
        &[x],
        EPS,
        |t, v| {
            let y = t.mul(v[0], v[0])?;
            t.mean(y)
        },
        |a, _| a[0].data.iter().map(|v| v * v).sum::<f64>() / 8.0,
    )
}

fn select(seed: u64) -> GradCheck {
    let mut g = rng(seed);
    let idx = g.random_range(0..6);
    let x = random_tensor(&mut g, &[2, 3], 1.0);
    grad_check(
        &[x],
        EPS,
        |t, v| {
            let y = t.exp(v[0])?;
            t.select(y, idx)
        },
        |a, _| a[0].data[idx].exp(),
    )
}

fn random_labels(g: &mut impl Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| g.random_range(0..classes)).collect()
}

fn ce(seed: u64) -> GradCheck {
    let mut g = rng(seed);
    let labels = random_labels(&mut g, 6, 4);
    let logits = random_tensor(&mut g, &[6, 4], 2.0);
    grad_check(
        &[logits],
        EPS,
        |t, v| {
            let p = t.softmax(v[0])?;
            losses::ce_loss(t, p, &labels)
        },
        |a, _| r::ce(&r::softmax(&a[0]), &labels),
    )
}

fn scl(seed: u64) -> GradCheck {
    let mut g = rng(seed);
    let n = g.random_range(3..=8);
    let mut labels = random_labels(&mut g, n, 3);
    labels[1] = labels[0];
    let tau = if seed % 2 == 0 { 0.07f32 } else { 0.5 };
    let x = random_tensor(&mut g, &[n, 5], 1.0);
    grad_check(
        &[x],
        EPS,
        |t, v| {
            let z = t.l2_normalize(v[0])?;
            Ok(losses::scl_loss(t, z, &labels, &SclConfig { temperature: tau })?.loss)
        },
        |a, _| r::scl(&r::l2_normalize(&a[0]), &labels, f64::from(tau)),
    )
}

fn triplet(seed: u64) -> GradCheck {
    let mut g = rng(seed);
    let n = g.random_range(4..=10);
    let mut labels = random_labels(&mut g, n, 3);
    labels[1] = labels[0];
    labels[2] = (labels[0] + 1) % 3;
    let x = random_tensor(&mut g, &[n, 4], 0.6);
    let cfg = TripletConfig::default();
    let batch = LabeledBatch::new(x.clone(), labels.clone()).unwrap();
    let triplets = losses::mine_semi_hard(&batch, &cfg);
    let idx: Vec<_> = triplets.iter().map(|t| (t.anchor, t.positive, t.negative)).collect();
    grad_check(
        &[x],
        EPS,
        |t, v| losses::triplet_loss(t, v[0], &labels, &triplets, &cfg),
        |a, br| r::triplet(&a[0], &idx, f64::from(cfg.margin), br),
    )
}

/// conv-relu-conv-relu-pool-conv-gap-linear-softmax-ce over every parameter.
fn conv_net(seed: u64) -> GradCheck {
    let mut g = rng(seed);
    let labels = random_labels(&mut g, 2, 3);
    let inputs = vec![
        random_tensor(&mut g, &[2, 2, 6, 6], 1.0),
        random_tensor(&mut g, &[3, 2, 3, 3], 0.6),
        random_tensor(&mut g, &[3], 0.2),
        random_tensor(&mut g, &[4, 3, 3, 3], 0.6),
        random_tensor(&mut g, &[4], 0.2),
        random_tensor(&mut g, &[4, 4, 3, 3], 0.6),
        random_tensor(&mut g, &[4], 0.2),
        random_tensor(&mut g, &[3, 4], 1.0),
        random_tensor(&mut g, &[3], 0.2),
    ];
    grad_check(
        &inputs,
        EPS,
        |t, v| {
            let h = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
            let h = t.relu(h)?;
            let h = t.conv2d(h, v[3], Some(v[4]), 1, 1)?;
            let h = t.relu(h)?;
            let h = t.max_pool2d(h, 2)?;
            let h = t.conv2d(h, v[5], Some(v[6]), 1, 1)?;
            let h = t.global_avg_pool(h)?;
            let logits = t.linear(h, v[7], Some(v[8]))?;
            let p = t.softmax(logits)?;
            losses::ce_loss(t, p, &labels)
        },
        |a: &[Arr], br| {
            let h = r::relu(&r::conv2d(&a[0], &a[1], &a[2], 1, 1), br);
            let h = r::relu(&r::conv2d(&h, &a[3], &a[4], 1, 1), br);
            let h = r::max_pool(&h, 2, br);
            let h = r::gap(&r::conv2d(&h, &a[5], &a[6], 1, 1));
            r::ce(&r::softmax(&r::linear(&h, &a[7], &a[8])), &labels)
        },
    )
}

/// Worst relative error and overall kink-skip ratio of `case` over `seeds`.
pub fn run_case(case: fn(u64) -> GradCheck, seeds: std::ops::Range<u64>) -> (f64, f64) {
    let mut worst = 0.0f64;
    let (mut skipped, mut checked) = (0usize, 0usize);
    for s in seeds {
        let res = case(s);
        worst = worst.max(res.worst());
        skipped += res.skipped;
        checked += res.checked;
    }
    (worst, skipped as f64 / (skipped + checked).max(1) as f64)
}
