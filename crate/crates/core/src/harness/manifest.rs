use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ExperimentConfig;
use crate::data::DatasetManifest;
use crate::error::{Error, Result};
use crate::model::Objective;
use crate::nn::io::file_checksum;

pub const BUILD_ID: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenData,
    Train,
    Probe,
    Explain,
    Evaluate,
    Report,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::Train => "train",
            Stage::Probe => "probe",
            Stage::Explain => "explain",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    /// The file a later stage looks for first.
    fn primary(self) -> &'static str {
        match self {
            Stage::GenData => "data/dataset.json",
            Stage::Train => "model.camb",
            Stage::Probe => "accuracy.json",
            Stage::Explain => "explain",
            Stage::Evaluate => "metrics.csv",
            Stage::Report => "report/report.json",
        }
    }
}

/// Paths of every artifact under an output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn train_split(&self) -> PathBuf {
        self.data_dir().join("train.camb")
    }

    pub fn test_split(&self) -> PathBuf {
        self.data_dir().join("test.camb")
    }

    pub fn dataset_manifest(&self) -> PathBuf {
        self.data_dir().join("dataset.json")
    }

    pub fn run_dir(&self, loss: Objective, seed: u64) -> PathBuf {
        self.root.join("runs").join(loss.name()).join(format!("seed{seed}"))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    /// `path` relative to the root, with `/` separators.
    pub fn relative(&self, path: &Path) -> String {
        let rel = path.strip_prefix(&self.root).unwrap_or(path);
        rel.components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/")
    }

    /// Checksums of `paths`, keyed by relative path.
    pub fn checksums(&self, paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
        paths
            .iter()
            .map(|p| Ok((self.relative(p), file_checksum(p)?)))
            .collect()
    }

    /// Load the dataset manifest and check the split files against it.
    pub fn verified_dataset(&self) -> Result<DatasetManifest> {
        let path = self.dataset_manifest();
        if !path.exists() {
            return Err(missing(path, Stage::GenData));
        }
        let manifest: DatasetManifest = serde_json::from_slice(&std::fs::read(&path)?)?;
        for (name, sum) in &manifest.checksums {
            verify_file(&self.data_dir().join(name), sum, Stage::GenData)?;
        }
        Ok(manifest)
    }
}

fn missing(path: PathBuf, stage: Stage) -> Error {
    Error::MissingArtifact {
        path,
        stage: stage.name().into(),
    }
}

fn verify_file(path: &Path, sum: &str, stage: Stage) -> Result<()> {
    if !path.exists() {
        return Err(missing(path.to_path_buf(), stage));
    }
    if file_checksum(path)? != sum {
        return Err(Error::StaleArtifact {
            path: path.to_path_buf(),
            stage: stage.name().into(),
        });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Relative path to SHA-256 of each file the stage read.
    pub inputs: BTreeMap<String, String>,
    /// Relative path to SHA-256 of each file the stage wrote.
    pub outputs: BTreeMap<String, String>,
    pub wall_clock_s: f64,
    pub threads: usize,
}

/// Everything needed to re-run one (loss, seed) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub build: String,
    pub desk_scale: bool,
    pub loss: Objective,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub stages: BTreeMap<Stage, StageRecord>,
}

impl RunManifest {
    pub fn new(config: &ExperimentConfig, loss: Objective, seed: u64) -> Self {
        Self {
            build: BUILD_ID.into(),
            desk_scale: config.experiment.desk_scale,
            loss,
            seed,
            config: config.clone(),
            stages: BTreeMap::new(),
        }
    }

    pub fn path(run_dir: &Path) -> PathBuf {
        run_dir.join("manifest.json")
    }

    /// Load the manifest of a run and check that `required` stages ran with
    /// this config and that their outputs are unchanged.
    pub fn open(layout: &Layout, config: &ExperimentConfig, loss: Objective, seed: u64, required: &[Stage]) -> Result<Self> {
        let dir = layout.run_dir(loss, seed);
        let path = Self::path(&dir);
        if !path.exists() {
            return Err(missing(dir.join(Stage::Train.primary()), Stage::Train));
        }
        let manifest: Self = serde_json::from_slice(&std::fs::read(&path)?)?;
        if manifest.config != *config {
            return Err(Error::Config(format!(
                "{} was produced with a different config; re-run `train`",
                path.display()
            )));
        }
        for stage in required {
            let record = manifest
                .stages
                .get(stage)
                .ok_or_else(|| missing(dir.join(stage.primary()), *stage))?;
            for (rel, sum) in &record.outputs {
                verify_file(&layout.root().join(rel), sum, *stage)?;
            }
        }
        Ok(manifest)
    }

    /// Record `stage` and drop every later stage, whose outputs are now stale.
    pub fn record(&mut self, stage: Stage, record: StageRecord) {
        self.stages.retain(|s, _| *s < stage);
        self.stages.insert(stage, record);
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        std::fs::write(Self::path(run_dir), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
