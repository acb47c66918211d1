use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Bound, HeadKind, ModelBundle};
use crate::data::{augment, derive_seed, AugmentationPolicy, DatasetStats, ImageSample};
use crate::error::{Error, Result};
use crate::losses::{ce_loss, mine_semi_hard, scl_loss, triplet_loss, LabeledBatch, SclConfig, TripletConfig};
use crate::metrics::Classifier;
use crate::nn::{LrSchedule, OptimizerState, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Ce,
    Scl,
    Tl,
}

impl Objective {
    pub const ALL: [Objective; 3] = [Objective::Ce, Objective::Scl, Objective::Tl];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Ce => "ce",
            Objective::Scl => "scl",
            Objective::Tl => "tl",
        }
    }

    pub fn is_contrastive(self) -> bool {
        self != Objective::Ce
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(Objective::Ce),
            "scl" => Ok(Objective::Scl),
            "tl" => Ok(Objective::Tl),
            other => Err(Error::Config(format!("unknown loss `{other}` (expected ce, scl or tl)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub warmup_epochs: usize,
    pub scl: SclConfig,
    pub triplet: TripletConfig,
    pub augmentation: AugmentationPolicy,
    /// Rescale the full gradient to at most this L2 norm.
    pub grad_clip: Option<f32>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn schedule(&self) -> Result<LrSchedule> {
        LrSchedule::new(self.lr, self.warmup_epochs, self.epochs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Rate at the start of the epoch.
    pub lr: f32,
    pub loss: f32,
    /// Running accuracy on the augmented training batches, CE only.
    pub accuracy: Option<f32>,
    /// SCL anchors without a positive, summed over the epoch.
    pub skipped_anchors: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,loss,accuracy\n");
        for r in &self.records {
            let acc = r.accuracy.map(|a| format!("{a:.6}")).unwrap_or_default();
            out.push_str(&format!("{},{:.8},{:.8},{}\n", r.epoch, r.lr, r.loss, acc));
        }
        out
    }
}

const AUGMENT_STREAM: u64 = 0x6175_676d;

/// Train `bundle` in place with mini-batch SGD and warmup-cosine rates
/// updated every step.
pub fn train(
    bundle: &mut ModelBundle,
    samples: &[ImageSample],
    stats: &DatasetStats,
    objective: Objective,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    if objective.is_contrastive() != bundle.is_contrastive() {
        return Err(Error::contract(format!(
            "loss {objective} does not match a {:?} head",
            bundle.head
        )));
    }
    if cfg.batch_size < 2 || samples.len() < 2 {
        return Err(Error::Config("training needs batch size and dataset of at least 2".into()));
    }
    cfg.augmentation.validate()?;
    let schedule = cfg.schedule()?;
    let mut opt = OptimizerState::new(cfg.lr, cfg.momentum, cfg.weight_decay)?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let steps = samples.len().div_ceil(cfg.batch_size);
    let mut log = TrainLog::default();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let (mut loss_sum, mut seen, mut correct, mut skipped) = (0.0f64, 0usize, 0usize, 0usize);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let lr = schedule.lr_at_progress(epoch as f32 + step as f32 / steps as f32);
            opt.lr = lr;
            let diverged = |detail: String| Error::Diverged {
                epoch,
                batch: step,
                lr,
                detail,
            };
            let mut views = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    cfg.seed ^ AUGMENT_STREAM,
                    epoch as u64,
                    i as u64,
                ));
                let aug = augment(&samples[i], &cfg.augmentation, &mut rng)?;
                views.push(stats.normalize_image(&aug.image)?);
            }
            let labels: Vec<usize> = chunk.iter().map(|&i| samples[i].label).collect();
            let batch = Tensor::stack(&views.iter().collect::<Vec<_>>())?;

            let outcome = step_once(bundle, &batch, &labels, objective, cfg);
            let (loss_value, mut grads, batch_correct, batch_skipped) = match outcome {
                Ok(v) => v,
                Err(Error::Numeric(what)) => return Err(diverged(format!("non-finite value in {what}"))),
                Err(Error::DegenerateBatch(why)) => {
                    log::warn!("epoch {epoch} batch {step} skipped: {why}");
                    continue;
                }
                Err(e) => return Err(e),
            };
            if !loss_value.is_finite() {
                return Err(diverged(format!("loss is {loss_value}")));
            }
            if let Some(limit) = cfg.grad_clip {
                clip_global_norm(&mut grads, limit);
            }
            opt.sgd_step(&mut bundle.params, &grads)?;
            if let Some((name, _)) = bundle.params.iter().find(|(_, t)| !t.is_finite()) {
                return Err(diverged(format!("parameter {name} became non-finite")));
            }
            loss_sum += loss_value as f64 * chunk.len() as f64;
            seen += chunk.len();
            correct += batch_correct;
            skipped += batch_skipped;
        }
        let record = EpochRecord {
            epoch,
            lr: schedule.lr_at(epoch)?,
            loss: (loss_sum / seen.max(1) as f64) as f32,
            accuracy: (objective == Objective::Ce).then(|| correct as f32 / seen.max(1) as f32),
            skipped_anchors: skipped,
        };
        log::debug!(
            "{} {objective} epoch {epoch}: loss {:.4} acc {:?}",
            bundle.id,
            record.loss,
            record.accuracy
        );
        log.records.push(record);
    }
    Ok(log)
}

type StepOutput = (f32, Vec<Tensor>, usize, usize);

fn step_once(
    bundle: &ModelBundle,
    batch: &Tensor,
    labels: &[usize],
    objective: Objective,
    cfg: &TrainConfig,
) -> Result<StepOutput> {
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, &bundle.params, true);
    let x = tape.constant(batch.clone());
    let a = bundle.backbone_on(&mut tape, &bound, x)?;
    let pooled = tape.global_avg_pool(a)?;
    let (loss, correct, skipped) = match objective {
        Objective::Ce => {
            let logits = bundle.logits_on(&mut tape, Some(&bound), pooled)?;
            let probs = tape.softmax(logits)?;
            let correct = argmax_rows(tape.value(probs))
                .iter()
                .zip(labels)
                .filter(|(p, l)| p == l)
                .count();
            (ce_loss(&mut tape, probs, labels)?, correct, 0)
        }
        Objective::Scl => {
            let z = bundle.project_on(&mut tape, &bound, pooled)?;
            let out = scl_loss(&mut tape, z, labels, &cfg.scl)?;
            (out.loss, 0, out.skipped)
        }
        Objective::Tl => {
            let z = bundle.project_on(&mut tape, &bound, pooled)?;
            let mined = LabeledBatch::new(tape.value(z).clone(), labels.to_vec())?;
            let triplets = mine_semi_hard(&mined, &cfg.triplet);
            (triplet_loss(&mut tape, z, labels, &triplets, &cfg.triplet)?, 0, 0)
        }
    };
    let value = tape.value(loss).item()?;
    let mut grads = tape.backward(loss)?;
    let grads = bound.vars.iter().map(|v| grads.take(*v)).collect();
    Ok((value, grads, correct, skipped))
}

/// Scale `grads` so their joint L2 norm is at most `limit`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], limit: f32) -> f32 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| (*v as f64) * (*v as f64))
        .sum::<f64>()
        .sqrt() as f32;
    if norm > limit && norm > 0.0 {
        let k = limit / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

pub(crate) fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.shape()[0])
        .map(|i| {
            let row = t.outer(i);
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

const EVAL_CHUNK: usize = 128;

/// Global-average-pooled backbone features `[n, C]` of normalized samples.
pub fn pooled_features(bundle: &ModelBundle, samples: &[ImageSample], stats: &DatasetStats) -> Result<Tensor> {
    let c = bundle.spec.channels();
    let mut data = Vec::with_capacity(samples.len() * c);
    for chunk in samples.chunks(EVAL_CHUNK) {
        let images = chunk
            .iter()
            .map(|s| stats.normalize_image(&s.image))
            .collect::<Result<Vec<_>>>()?;
        let a = bundle.features(&Tensor::stack(&images.iter().collect::<Vec<_>>())?)?;
        let plane = a.shape()[2] * a.shape()[3];
        for i in 0..chunk.len() {
            data.extend(a.outer(i).chunks(plane).map(|p| p.iter().sum::<f32>() / plane as f32));
        }
    }
    Tensor::new(vec![samples.len(), c], data)
}

/// Top-1 accuracy of the head (or probe) on unaugmented samples.
pub fn accuracy(bundle: &ModelBundle, samples: &[ImageSample], stats: &DatasetStats) -> Result<f32> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for chunk in samples.chunks(EVAL_CHUNK) {
        let images = chunk
            .iter()
            .map(|s| stats.normalize_image(&s.image))
            .collect::<Result<Vec<_>>>()?;
        let probs = bundle.probabilities(&Tensor::stack(&images.iter().collect::<Vec<_>>())?)?;
        correct += argmax_rows(&probs)
            .iter()
            .zip(chunk)
            .filter(|(p, s)| **p == s.label)
            .count();
    }
    Ok(correct as f32 / samples.len() as f32)
}

impl HeadKind {
    pub fn for_objective(objective: Objective, channels: usize) -> Self {
        match objective {
            Objective::Ce => HeadKind::Classification,
            _ => HeadKind::projection_default(channels),
        }
    }
}
