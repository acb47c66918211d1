use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{AugmentationPolicy, ShapesSpec};
use crate::error::{Error, Result};
use crate::explain::{EigenCamMode, ExplainerKind};
use crate::losses::{MiningMode, SclConfig, TripletConfig};
use crate::metrics::{Baseline, LocalizationMode, MetricKind, PfCurve, RemovalSchedule};
use crate::model::{BackboneSpec, Objective, ProbeConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub probe: ProbeConfig,
    pub explain: ExplainSection,
    pub evaluate: EvaluateSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub losses: Vec<Objective>,
    /// Epochs, sizes and rates are scaled down from the full-size recipe.
    pub desk_scale: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Shapes,
    Cifar10,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    pub shapes: ShapesSpec,
    /// Directory with `data_batch_*.bin` and `test_batch.bin`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cifar10_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub backbone: BackboneSpec,
    pub projection_hidden: usize,
    pub projection_dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentPreset {
    None,
    Standard,
    Contrastive,
    Strong,
}

impl AugmentPreset {
    pub fn policy(self) -> AugmentationPolicy {
        match self {
            AugmentPreset::None => AugmentationPolicy::identity(),
            AugmentPreset::Standard => AugmentationPolicy::standard(),
            AugmentPreset::Contrastive => AugmentationPolicy::contrastive(),
            AugmentPreset::Strong => AugmentationPolicy::strong(),
        }
    }
}

/// Hyperparameters of one loss. `temperature` belongs to scl only and
/// `margin` to tl only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub warmup_epochs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f32>,
    pub augmentation: AugmentPreset,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin: Option<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub ce: LossSection,
    pub scl: LossSection,
    pub tl: LossSection,
}

impl TrainSection {
    pub fn get(&self, loss: Objective) -> &LossSection {
        match loss {
            Objective::Ce => &self.ce,
            Objective::Scl => &self.scl,
            Objective::Tl => &self.tl,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplainSection {
    pub explainers: Vec<ExplainerKind>,
    pub eigen_cam_mode: EigenCamMode,
    /// Leading test samples that get explained and scored.
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    pub metrics: Vec<MetricKind>,
    pub pf_baseline: Baseline,
    pub pf_step_fraction: f32,
    pub pf_curve: PfCurve,
    pub localization: LocalizationMode,
    pub continuity_sigma: f32,
}

impl EvaluateSection {
    pub fn removal(&self) -> RemovalSchedule {
        RemovalSchedule {
            baseline: self.pf_baseline,
            step_fraction: self.pf_step_fraction,
            curve: self.pf_curve,
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let shared = LossSection {
            epochs: 6,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_epochs: 1,
            grad_clip: Some(1.0),
            augmentation: AugmentPreset::Contrastive,
            temperature: None,
            margin: None,
        };
        Self {
            experiment: ExperimentSection {
                name: "shapes-desk".into(),
                output_dir: PathBuf::from("runs/shapes-desk"),
                seeds: vec![0, 1, 2, 3, 4],
                losses: Objective::ALL.to_vec(),
                desk_scale: true,
            },
            data: DataSection {
                source: DataSource::Shapes,
                shapes: ShapesSpec::default(),
                cifar10_dir: None,
            },
            model: ModelSection {
                backbone: BackboneSpec::default(),
                projection_hidden: 64,
                projection_dim: 128,
            },
            train: TrainSection {
                ce: LossSection {
                    epochs: 8,
                    batch_size: 32,
                    weight_decay: 5e-4,
                    augmentation: AugmentPreset::Standard,
                    ..shared.clone()
                },
                scl: LossSection {
                    temperature: Some(SclConfig::default().temperature),
                    ..shared.clone()
                },
                tl: LossSection {
                    margin: Some(TripletConfig::default().margin),
                    ..shared
                },
            },
            probe: ProbeConfig::default(),
            explain: ExplainSection {
                explainers: ExplainerKind::ALL.to_vec(),
                eigen_cam_mode: EigenCamMode::LeftSingular,
                samples: 100,
            },
            evaluate: EvaluateSection {
                metrics: MetricKind::ALL.to_vec(),
                pf_baseline: Baseline::DatasetMean,
                pf_step_fraction: 1.0 / 64.0,
                pf_curve: PfCurve::Probability,
                localization: LocalizationMode::Mass,
                continuity_sigma: 0.02,
            },
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        if e.seeds.is_empty() || e.losses.is_empty() {
            return Err(Error::Config("need at least one seed and one loss".into()));
        }
        let mut seeds = e.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != e.seeds.len() {
            return Err(Error::Config("duplicate seeds".into()));
        }
        for loss in Objective::ALL {
            let s = self.train.get(loss);
            let name = loss.name();
            match (loss, s.temperature.is_some(), s.margin.is_some()) {
                (Objective::Ce, false, false) | (Objective::Scl, true, false) | (Objective::Tl, false, true) => {}
                _ => {
                    return Err(Error::Config(format!(
                        "[train.{name}]: temperature belongs to scl only and margin to tl only"
                    )))
                }
            }
            if let Some(t) = s.temperature {
                if !(t > 0.0) {
                    return Err(Error::Config(format!("[train.{name}] temperature must be positive")));
                }
            }
            if let Some(m) = s.margin {
                if !(m >= 0.0) {
                    return Err(Error::Config(format!("[train.{name}] margin must be >= 0")));
                }
            }
            if s.epochs == 0 || s.warmup_epochs >= s.epochs || s.batch_size < 2 || !(s.lr > 0.0) {
                return Err(Error::Config(format!(
                    "[train.{name}] needs epochs > warmup_epochs, batch_size >= 2 and lr > 0"
                )));
            }
            if !(0.0..1.0).contains(&s.momentum) || s.weight_decay < 0.0 || s.grad_clip.is_some_and(|c| !(c > 0.0)) {
                return Err(Error::Config(format!("[train.{name}] momentum, weight decay or clip out of range")));
            }
        }
        if self.data.source == DataSource::Shapes {
            self.data.shapes.validate().map_err(|e| Error::Config(e.to_string()))?;
        } else if self.data.cifar10_dir.is_none() {
            return Err(Error::Config("cifar10 source needs data.cifar10_dir".into()));
        }
        self.model.backbone.validate()?;
        if self.model.projection_dim == 0 || self.model.projection_hidden == 0 {
            return Err(Error::Config("projection widths must be positive".into()));
        }
        if self.probe.epochs == 0 || self.probe.batch_size == 0 || !(self.probe.lr > 0.0) {
            return Err(Error::Config("[probe] needs epochs, batch_size and lr > 0".into()));
        }
        if self.explain.explainers.is_empty() || self.explain.samples == 0 {
            return Err(Error::Config("[explain] needs explainers and samples > 0".into()));
        }
        let ev = &self.evaluate;
        if !(ev.pf_step_fraction >= 0.0 && ev.pf_step_fraction <= 1.0) || !(ev.continuity_sigma >= 0.0) {
            return Err(Error::Config("[evaluate] step fraction or sigma out of range".into()));
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        match self.data.source {
            DataSource::Shapes => self.data.shapes.classes.len(),
            DataSource::Cifar10 => 10,
        }
    }

    /// Training settings for `loss` under `seed`.
    pub fn train_config(&self, loss: Objective, seed: u64) -> TrainConfig {
        let s = self.train.get(loss);
        TrainConfig {
            epochs: s.epochs,
            batch_size: s.batch_size,
            lr: s.lr,
            momentum: s.momentum,
            weight_decay: s.weight_decay,
            warmup_epochs: s.warmup_epochs,
            scl: SclConfig {
                temperature: s.temperature.unwrap_or(SclConfig::default().temperature),
            },
            triplet: TripletConfig {
                margin: s.margin.unwrap_or(TripletConfig::default().margin),
                mining: MiningMode::SemiHardWithHardFallback,
            },
            augmentation: s.augmentation.policy(),
            grad_clip: s.grad_clip,
            seed,
        }
    }
}
