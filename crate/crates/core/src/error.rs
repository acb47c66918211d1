use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value produced by {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("malformed tensor file: {0}")]
    Format(String),

    #[error("contrastive bundle has no trained linear probe")]
    MissingProbe,

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("invalid dataset spec: {0}")]
    Spec(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing artifact {path}: run `{stage}` first")]
    MissingArtifact { path: PathBuf, stage: String },

    #[error("artifact {path} changed since `{stage}` wrote it; re-run `{stage}`")]
    StaleArtifact { path: PathBuf, stage: String },

    #[error("no evaluated runs for {0}")]
    MissingRuns(String),

    #[error("training diverged at epoch {epoch}, batch {batch} (lr {lr}): {detail}")]
    Diverged {
        epoch: usize,
        batch: usize,
        lr: f32,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
