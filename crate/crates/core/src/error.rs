use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("model version mismatch: expected {expected}, found {found}")]
    Version { expected: u32, found: u32 },

    #[error("insufficient landmarks: need at least {needed} active, got {got}")]
    InsufficientLandmarks { needed: usize, got: usize },

    #[error("degenerate landmarks: {0}")]
    DegenerateLandmarks(String),

    #[error("insufficient samples: requested {requested}, only {available} masked voxels")]
    InsufficientSamples { requested: usize, available: usize },

    #[error("degenerate bins: only {distinct} distinct masked values, need {needed}")]
    DegenerateBins { distinct: usize, needed: usize },

    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("empty mask")]
    EmptyMask,

    #[error("degenerate statistics: {0}")]
    DegenerateStatistics(String),

    #[error("empty training set")]
    EmptyTrainingSet,

    #[error("invalid registration init: {0}")]
    InvalidInit(String),

    #[error("landmark names do not match: missing {0:?}")]
    NameMismatch(Vec<String>),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Corrupt {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
