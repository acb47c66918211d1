//! Config-driven pipeline: gen-data, train, probe, explain, evaluate, report.
//!
//! Layout under `experiment.output_dir`:
//!
//! ```text
//! data/{train,test}.camb, data/dataset.json
//! runs/{loss}/seed{s}/manifest.json
//!     model.camb, model.json, train_log.csv, accuracy.json, probe.camb
//!     explain/{explainer}.camb, explain/{explainer}.json
//!     metrics.csv, pf_curve.csv
//! report/report.json, report.csv, accuracy.csv, pf_curves.csv, directional.txt
//! ```

mod config;
mod manifest;
mod report;
mod stages;

pub use config::{
    AugmentPreset, DataSection, DataSource, EvaluateSection, ExperimentConfig, ExperimentSection, ExplainSection,
    LossSection, ModelSection, TrainSection,
};
pub use manifest::{Layout, RunManifest, Stage, StageRecord};
pub use report::{build_report, AccuracyRow, Report, TableRow};
pub use stages::{evaluate, explain, gen_data, probe, train, RunAccuracy, RunOptions};
