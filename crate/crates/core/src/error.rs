use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: row {row}: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("{path}: malformed header: {message}")]
    Header { path: PathBuf, message: String },

    #[error("rater series are not aligned; seconds missing from one side: {missing:?}")]
    Alignment { missing: Vec<u32> },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("value {value} outside [{low}, {high}]")]
    Range { value: f64, low: f64, high: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("input mode mismatch: {0}")]
    Mode(String),

    #[error("unsupported label distribution: {0}")]
    UnsupportedDistribution(String),

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Divergence { epoch: usize },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("unlabeled pool is exhausted")]
    ExhaustedPool,

    #[error("pool holds {available} entries but {required} are needed")]
    InsufficientPool { required: usize, available: usize },

    #[error("oracle failed: {0}")]
    Oracle(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("leakage: test student {0} present in training fold")]
    Leakage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Whether this error stems from a caller-supplied value or configuration
    /// rather than from the contents of a data file.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Mode(_) | Error::Dimension { .. } | Error::Range { .. }
        )
    }
}
