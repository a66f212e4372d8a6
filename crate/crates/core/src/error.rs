use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("row {0} has zero Euclidean norm")]
    ZeroNormRow(usize),

    #[error("non-finite entry at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("need at least {need} subjects, got {got}")]
    TooFewSubjects { need: usize, got: usize },

    #[error("fold count must be at least 2, got {0}")]
    BadK(usize),

    #[error("{}", factorization_message(*escalations, *jitter))]
    FactorizationFailure { escalations: usize, jitter: f64 },

    #[error("row mismatch: {0}")]
    RowMismatch(String),

    #[error("unknown label {label:?} on line {line}")]
    UnknownLabel { label: String, line: usize },

    #[error("parse error in {path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty evaluation set")]
    EmptySet,

    #[error("empty trace")]
    EmptyTrace,

    #[error("chain {chain} aborted: {reason}")]
    ChainAborted { chain: usize, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("TOML error: {0}")]
    Toml(#[from] toml::de::Error),
}

fn factorization_message(escalations: usize, jitter: f64) -> String {
    if jitter == 0.0 {
        "Cholesky factorization failed: matrix is not positive definite".to_owned()
    } else {
        format!(
            "Cholesky factorization failed after {escalations} jitter escalations (last jitter {jitter:e})"
        )
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by ill-conditioned numerics rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::FactorizationFailure { .. } | Error::ChainAborted { .. }
        )
    }
}
