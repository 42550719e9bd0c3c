use std::path::PathBuf;

use crate::tape::TapeError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tape(#[from] TapeError),

    #[error("cannot ingest {file}: {reason}")]
    Ingest { file: PathBuf, reason: String },

    #[error("no samples found in {0}")]
    EmptySplit(PathBuf),

    #[error("invalid synthetic spec: {0}")]
    SyntheticSpec(String),

    #[error("expected a {expected} split, got {actual}")]
    RoleMismatch {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("payload mismatch: {0}")]
    PayloadKind(String),

    #[error("model has no branch {0}")]
    MissingBranch(String),

    #[error("feature map height {0} is odd; upper/lower split needs an even height")]
    OddFeatureHeight(usize),

    #[error("clustering produced no clusters (eps {eps:.4})")]
    NoClusters { eps: f64 },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("sample {0} has no cluster centroid (outliers must be filtered before the conditional loss)")]
    MissingCentroid(usize),

    #[error("the two models of a pair share parameters")]
    SharedParameters,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
