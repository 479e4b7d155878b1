use std::path::PathBuf;

use crate::datapool::SampleId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("class index {class} out of range for {n_classes} classes")]
    ClassOutOfRange { class: usize, n_classes: usize },

    #[error("unknown sample id {0}")]
    UnknownSample(SampleId),

    #[error("sample {0} is not in the unlabeled target pool")]
    NotUnlabeled(SampleId),

    #[error("duplicate sample id {0}")]
    DuplicateSample(SampleId),

    #[error("empty batch passed to {0}")]
    EmptyBatch(&'static str),

    #[error("class {0} has no labeled samples")]
    MissingClass(usize),

    #[error("k = {k} exceeds vector dimension {dim}")]
    TopKTooLarge { k: usize, dim: usize },

    #[error("pseudo-labeled set cannot cover all {0} classes at any confidence threshold")]
    CoverageFailure(usize),

    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("dataset parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
