use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid value for `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{stage} training diverged at epoch {epoch} (non-finite loss)")]
    Divergence { stage: &'static str, epoch: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("index {index} out of range for {len} latent bits")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("zero vector has no direction")]
    ZeroVector,

    #[error("invalid uniform noise {0}: must lie strictly inside (0, 1)")]
    InvalidNoise(f64),

    #[error("artifact error: {0}")]
    Artifact(String),

    #[error("checksum mismatch for {what}: expected {expected}, found {found}")]
    ChecksumMismatch {
        what: String,
        expected: String,
        found: String,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
