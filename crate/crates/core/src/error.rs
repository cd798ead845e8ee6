use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no voxel exceeds the crop threshold {threshold}")]
    AllBelowThreshold { threshold: f64 },

    #[error("expected intensity domain {expected}, found {found}")]
    DomainMismatch {
        expected: &'static str,
        found: &'static str,
    },

    #[error("value {value} outside [{lo}, {hi}]")]
    OutOfRange { value: f64, lo: f64, hi: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("non-finite {loss} at {stage} step {step}")]
    NonFiniteLoss {
        stage: String,
        step: u64,
        loss: String,
        diagnostic: Option<PathBuf>,
    },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("checkpoint does not match configuration: {0}")]
    ResumeMismatch(String),

    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(PathBuf),

    #[error("bundle is not trained: {0}")]
    UntrainedBundle(String),

    #[error("labels are degenerate: {0}")]
    DegenerateLabels(String),

    #[error("lesion does not fit inside the brain: {0}")]
    LesionOutOfBounds(String),

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("output directory {0} is locked by another command")]
    Locked(PathBuf),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: &[usize], got: &[usize]) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }
}

/// Process exit status for a failed command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Usage = 1,
    Data = 2,
    Divergence = 3,
}

impl Error {
    pub fn exit_status(&self) -> ExitStatus {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) | Error::ResumeMismatch(_) | Error::Locked(_) => {
                ExitStatus::Usage
            }
            Error::NonFiniteLoss { .. } => ExitStatus::Divergence,
            _ => ExitStatus::Data,
        }
    }
}
