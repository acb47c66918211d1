//! Oracle-equivalence sweeps for the losses and the triplet miner.

use camb::losses::{self, LabeledBatch, SclConfig, TripletConfig};
use camb::nn::{Tape, Tensor};
use rand::Rng;

use super::{naive_ce, naive_scl, random_tensor, rng, rows, sq_dist, unit_rows};

fn close(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

/// Worst scaled deviation of `scl_loss` from the two-loop oracle.
pub fn scl_sweep(batches: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..batches {
        let mut g = rng(1000 + seed);
        let n = g.random_range(2..=8);
        let k = g.random_range(2..=6);
        let mut labels: Vec<usize> = (0..n).map(|_| g.random_range(0..3)).collect();
        labels[1] = labels[0];
        let tau = [0.07f32, 0.1, 0.5, 1.0][g.random_range(0..4)];
        let z = unit_rows(&mut g, n, k);
        let mut tape = Tape::new();
        let v = tape.constant(z.clone());
        let out = losses::scl_loss(&mut tape, v, &labels, &SclConfig { temperature: tau }).unwrap();
        let got = f64::from(tape.value(out.loss).item().unwrap());
        let rows64: Vec<Vec<f64>> = rows(&z).iter().map(|r| r.iter().map(|&x| f64::from(x)).collect()).collect();
        let want = naive_scl(&rows64, &labels, f64::from(tau)).unwrap();
        worst = worst.max(close(got, want));
    }
    worst
}

pub fn ce_sweep(batches: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..batches {
        let mut g = rng(2000 + seed);
        let n = g.random_range(1..=8);
        let p = g.random_range(2..=5);
        let labels: Vec<usize> = (0..n).map(|_| g.random_range(0..p)).collect();
        let mut tape = Tape::new();
        let logits = tape.constant(random_tensor(&mut g, &[n, p], 3.0));
        let probs = tape.softmax(logits).unwrap();
        let l = losses::ce_loss(&mut tape, probs, &labels).unwrap();
        let got = f64::from(tape.value(l).item().unwrap());
        let pt = tape.value(probs);
        let rows64: Vec<Vec<f64>> = rows(pt).iter().map(|r| r.iter().map(|&x| f64::from(x)).collect()).collect();
        worst = worst.max(close(got, naive_ce(&rows64, &labels)));
    }
    worst
}

/// Checks every mined triplet against an exhaustive scan of the batch.
/// Returns the number of violations found.
pub fn mining_sweep(batches: u64) -> usize {
    let cfg = TripletConfig::default();
    let mut violations = 0;
    for seed in 0..batches {
        let mut g = rng(3000 + seed);
        let n = g.random_range(2..=12);
        let classes = g.random_range(2..=4);
        let labels: Vec<usize> = (0..n).map(|_| g.random_range(0..classes)).collect();
        let x = random_tensor(&mut g, &[n, 3], 0.5);
        let batch = LabeledBatch::new(x.clone(), labels.clone()).unwrap();
        let mined = losses::mine_semi_hard(&batch, &cfg);
        let single_class = labels.iter().all(|&l| l == labels[0]);
        let mut expected_pairs = 0;
        for a in 0..n {
            for p in 0..n {
                if a == p || labels[a] != labels[p] {
                    continue;
                }
                let negatives: Vec<usize> = (0..n).filter(|&m| labels[m] != labels[a]).collect();
                if negatives.is_empty() || single_class {
                    continue;
                }
                expected_pairs += 1;
                let emitted: Vec<_> = mined.iter().filter(|t| t.anchor == a && t.positive == p).collect();
                if emitted.len() != 1 {
                    violations += 1;
                    continue;
                }
                let m = emitted[0].negative;
                let d = |j: usize| sq_dist(x.outer(a), x.outer(j));
                let d_ap = d(p);
                let in_band = |j: usize| d(j) > d_ap && d(j) < d_ap + cfg.margin;
                let ok = if in_band(m) {
                    negatives.iter().all(|&j| !in_band(j) || d(j) >= d(m))
                } else {
                    negatives.iter().all(|&j| !in_band(j)) && negatives.iter().all(|&j| d(j) >= d(m))
                };
                if !ok || labels[m] == labels[a] {
                    violations += 1;
                }
            }
        }
        if mined.len() != expected_pairs {
            violations += 1;
        }
    }
    violations
}

pub fn pinned_scl_batch() -> (Tensor, Vec<usize>) {
    let z = Tensor::new(vec![4, 2], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
    (z, vec![0, 0, 1, 1])
}
