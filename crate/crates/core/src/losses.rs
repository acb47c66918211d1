//! Training objectives: cross-entropy on probabilities, supervised
//! contrastive loss on unit embeddings, and triplet loss with in-batch
//! semi-hard negative mining. All reductions are batch means.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{CustomOp, Tape, Tensor, Var};

const PROB_FLOOR: f32 = 1e-12;

/// Embeddings (or probabilities) with one class id per row.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub values: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(values: Tensor, labels: Vec<usize>) -> Result<Self> {
        if values.rank() != 2 || values.shape()[0] != labels.len() {
            return Err(Error::dim(format!(
                "batch of shape {:?} with {} labels",
                values.shape(),
                labels.len()
            )));
        }
        Ok(Self { values, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn row(&self, i: usize) -> &[f32] {
        self.values.outer(i)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SclConfig {
    pub temperature: f32,
}

impl Default for SclConfig {
    fn default() -> Self {
        Self { temperature: 0.07 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MiningMode {
    SemiHardWithHardFallback,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletConfig {
    pub margin: f32,
    pub mining: MiningMode,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self {
            margin: 0.3,
            mining: MiningMode::SemiHardWithHardFallback,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

fn check_labels(n: usize, labels: &[usize]) -> Result<()> {
    if n != labels.len() {
        return Err(Error::dim(format!("{n} rows but {} labels", labels.len())));
    }
    Ok(())
}

fn rows_of(tape: &Tape, v: Var, what: &str) -> Result<(usize, usize)> {
    match tape.value(v).shape() {
        [n, k] => Ok((*n, *k)),
        s => Err(Error::dim(format!("{what} expects a matrix, got {s:?}"))),
    }
}

// ---------------------------------------------------------------------------
// Cross-entropy

#[derive(Debug)]
struct CrossEntropyOp {
    labels: Vec<usize>,
    clamped: Vec<bool>,
}

impl CustomOp for CrossEntropyOp {
    fn name(&self) -> &'static str {
        "ce_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_output: &Tensor) -> Vec<Tensor> {
        let probs = inputs[0];
        let (n, p) = (probs.shape()[0], probs.shape()[1]);
        let g = grad_output.data()[0];
        let mut d = Tensor::zeros(probs.shape());
        for (i, &y) in self.labels.iter().enumerate() {
            if !self.clamped[i] {
                d.data_mut()[i * p + y] = -g / (n as f32 * probs.data()[i * p + y]);
            }
        }
        vec![d]
    }
}

/// Mean over rows of `-ln f(x_i)[y_i]`, probabilities clamped at 1e-12.
pub fn ce_loss(tape: &mut Tape, probabilities: Var, labels: &[usize]) -> Result<Var> {
    let (n, p) = rows_of(tape, probabilities, "ce_loss")?;
    check_labels(n, labels)?;
    if n == 0 {
        return Err(Error::dim("ce_loss on an empty batch"));
    }
    let probs = tape.value(probabilities);
    let mut total = 0.0f64;
    let mut clamped = Vec::with_capacity(n);
    for (i, &y) in labels.iter().enumerate() {
        if y >= p {
            return Err(Error::contract(format!("label {y} outside {p} classes")));
        }
        let q = probs.data()[i * p + y];
        let floor = q < PROB_FLOOR;
        if floor {
            log::warn!("ce_loss: probability {q} at the true class clamped to {PROB_FLOOR}");
        }
        clamped.push(floor);
        total -= f64::from(q.max(PROB_FLOOR)).ln();
    }
    let value = Tensor::scalar((total / n as f64) as f32);
    tape.custom(
        Box::new(CrossEntropyOp {
            labels: labels.to_vec(),
            clamped,
        }),
        &[probabilities],
        value,
    )
}

// ---------------------------------------------------------------------------
// Supervised contrastive

#[derive(Debug)]
struct SupConOp {
    /// d loss / d similarity logit (z_i . z_a / tau), row-major n x n.
    dlogits: Vec<f32>,
    temperature: f32,
}

impl CustomOp for SupConOp {
    fn name(&self) -> &'static str {
        "scl_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_output: &Tensor) -> Vec<Tensor> {
        let z = inputs[0];
        let (n, k) = (z.shape()[0], z.shape()[1]);
        let scale = grad_output.data()[0] / self.temperature;
        let mut d = Tensor::zeros(z.shape());
        for i in 0..n {
            let di = &mut d.data_mut()[i * k..(i + 1) * k];
            for a in 0..n {
                let w = (self.dlogits[i * n + a] + self.dlogits[a * n + i]) * scale;
                if w != 0.0 {
                    for (dv, zv) in di.iter_mut().zip(z.outer(a)) {
                        *dv += w * zv;
                    }
                }
            }
        }
        vec![d]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SclOutput {
    pub loss: Var,
    /// Anchors without any same-class partner in the batch.
    pub skipped: usize,
}

/// Supervised contrastive loss over unit-norm rows of `embeddings`.
///
/// Anchors with no positive contribute nothing and are tallied in
/// [`SclOutput::skipped`]; the loss is the mean over contributing anchors.
pub fn scl_loss(tape: &mut Tape, embeddings: Var, labels: &[usize], cfg: &SclConfig) -> Result<SclOutput> {
    let (n, _) = rows_of(tape, embeddings, "scl_loss")?;
    check_labels(n, labels)?;
    if !(cfg.temperature > 0.0) {
        return Err(Error::contract("temperature must be positive"));
    }
    if n < 2 {
        return Err(Error::DegenerateBatch(format!("scl_loss needs at least 2 samples, got {n}")));
    }
    let z = tape.value(embeddings);
    for i in 0..n {
        let norm = z.outer(i).iter().map(|v| v * v).sum::<f32>().sqrt();
        if (norm - 1.0).abs() > 1e-4 {
            return Err(Error::contract(format!("scl_loss: row {i} has norm {norm}, expected 1")));
        }
    }
    let tau = cfg.temperature;
    let mut logits = vec![0.0f32; n * n];
    for i in 0..n {
        for a in 0..n {
            let s: f32 = z.outer(i).iter().zip(z.outer(a)).map(|(x, y)| x * y).sum();
            logits[i * n + a] = s / tau;
        }
    }

    let mut dlogits = vec![0.0f32; n * n];
    let mut total = 0.0f64;
    let mut contributing = 0usize;
    for i in 0..n {
        let positives: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
        if positives.is_empty() {
            continue;
        }
        contributing += 1;
        let row = &logits[i * n..(i + 1) * n];
        let max = (0..n).filter(|&a| a != i).map(|a| row[a]).fold(f32::NEG_INFINITY, f32::max);
        let denom: f64 = (0..n)
            .filter(|&a| a != i)
            .map(|a| f64::from(row[a] - max).exp())
            .sum();
        let lse = f64::from(max) + denom.ln();
        let mean_pos = positives.iter().map(|&j| f64::from(row[j])).sum::<f64>() / positives.len() as f64;
        total += lse - mean_pos;
        // softmax minus the positive indicator, formed in f64: for a saturated
        // anchor both terms are ~1 and the difference is what matters
        let w = 1.0 / positives.len() as f64;
        let drow = &mut dlogits[i * n..(i + 1) * n];
        for a in (0..n).filter(|&a| a != i) {
            let mut d = f64::from(row[a] - max).exp() / denom;
            if labels[a] == labels[i] {
                d -= w;
            }
            drow[a] = d as f32;
        }
    }
    let skipped = n - contributing;
    if contributing == 0 {
        return Err(Error::DegenerateBatch("no anchor has a positive in the batch".into()));
    }
    if skipped > 0 {
        log::debug!("scl_loss: skipped {skipped} anchors without positives");
    }
    let inv = 1.0 / contributing as f32;
    dlogits.iter_mut().for_each(|v| *v *= inv);
    let value = Tensor::scalar((total / contributing as f64) as f32);
    let loss = tape.custom(
        Box::new(SupConOp {
            dlogits,
            temperature: tau,
        }),
        &[embeddings],
        value,
    )?;
    Ok(SclOutput { loss, skipped })
}

// ---------------------------------------------------------------------------
// Triplet

fn squared_distance(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// For every ordered same-class (anchor, positive) pair pick the closest
/// negative inside the band `d(a,p) < d(a,n) < d(a,p) + margin`; without one,
/// fall back to the closest negative overall. Distances are squared
/// Euclidean; ties go to the lowest index.
pub fn mine_semi_hard(batch: &LabeledBatch, cfg: &TripletConfig) -> Vec<Triplet> {
    let n = batch.len();
    let first = batch.labels.first().copied();
    if batch.labels.iter().all(|&l| Some(l) == first) {
        log::warn!("mine_semi_hard: batch has a single class, no triplets");
        return Vec::new();
    }
    let mut dist = vec![0.0f32; n * n];
    for i in 0..n {
        for j in 0..n {
            dist[i * n + j] = squared_distance(batch.row(i), batch.row(j));
        }
    }
    let mut triplets = Vec::new();
    for a in 0..n {
        for p in (0..n).filter(|&p| p != a && batch.labels[p] == batch.labels[a]) {
            let d_ap = dist[a * n + p];
            let mut semi_hard: Option<(f32, usize)> = None;
            let mut hardest: Option<(f32, usize)> = None;
            for neg in (0..n).filter(|&m| batch.labels[m] != batch.labels[a]) {
                let d_an = dist[a * n + neg];
                if hardest.is_none_or(|(d, _)| d_an < d) {
                    hardest = Some((d_an, neg));
                }
                if d_an > d_ap && d_an < d_ap + cfg.margin && semi_hard.is_none_or(|(d, _)| d_an < d) {
                    semi_hard = Some((d_an, neg));
                }
            }
            if let Some((_, negative)) = semi_hard.or(hardest) {
                triplets.push(Triplet {
                    anchor: a,
                    positive: p,
                    negative,
                });
            }
        }
    }
    triplets
}

#[derive(Debug)]
struct TripletOp {
    triplets: Vec<Triplet>,
    active: Vec<bool>,
}

impl CustomOp for TripletOp {
    fn name(&self) -> &'static str {
        "triplet_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_output: &Tensor) -> Vec<Tensor> {
        let e = inputs[0];
        let k = e.shape()[1];
        let mut d = Tensor::zeros(e.shape());
        if self.triplets.is_empty() {
            return vec![d];
        }
        let g = grad_output.data()[0] / self.triplets.len() as f32;
        for (t, _) in self.triplets.iter().zip(&self.active).filter(|(_, &on)| on) {
            let (a, p, n) = (e.outer(t.anchor), e.outer(t.positive), e.outer(t.negative));
            let mut da = vec![0.0; k];
            let mut dp = vec![0.0; k];
            let mut dn = vec![0.0; k];
            for c in 0..k {
                da[c] = 2.0 * g * (n[c] - p[c]);
                dp[c] = -2.0 * g * (a[c] - p[c]);
                dn[c] = 2.0 * g * (a[c] - n[c]);
            }
            for (idx, delta) in [(t.anchor, da), (t.positive, dp), (t.negative, dn)] {
                d.outer_mut(idx).iter_mut().zip(delta).for_each(|(x, y)| *x += y);
            }
        }
        vec![d]
    }
}

/// Mean hinge `max(0, |a-p|^2 - |a-n|^2 + margin)` over `triplets`.
pub fn triplet_loss(tape: &mut Tape, embeddings: Var, labels: &[usize], triplets: &[Triplet], cfg: &TripletConfig) -> Result<Var> {
    let (n, _) = rows_of(tape, embeddings, "triplet_loss")?;
    check_labels(n, labels)?;
    if !(cfg.margin > 0.0) {
        return Err(Error::contract("margin must be positive"));
    }
    for t in triplets {
        let valid = t.anchor < n
            && t.positive < n
            && t.negative < n
            && t.anchor != t.positive
            && labels[t.anchor] == labels[t.positive]
            && labels[t.anchor] != labels[t.negative];
        if !valid {
            return Err(Error::contract(format!("invalid triplet {t:?}")));
        }
    }
    if triplets.is_empty() {
        log::warn!("triplet_loss: empty triplet list, loss is 0");
    }
    let e = tape.value(embeddings);
    let mut total = 0.0f64;
    let mut active = Vec::with_capacity(triplets.len());
    for t in triplets {
        let h = squared_distance(e.outer(t.anchor), e.outer(t.positive))
            - squared_distance(e.outer(t.anchor), e.outer(t.negative))
            + cfg.margin;
        active.push(h > 0.0);
        total += f64::from(h.max(0.0));
    }
    let value = if triplets.is_empty() {
        0.0
    } else {
        (total / triplets.len() as f64) as f32
    };
    tape.custom(
        Box::new(TripletOp {
            triplets: triplets.to_vec(),
            active,
        }),
        &[embeddings],
        Tensor::scalar(value),
    )
}
