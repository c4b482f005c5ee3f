use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the forecasting engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("too many malformed rows: {rejected} of {total} rejected (limit {limit})")]
    TooManyRejects {
        rejected: usize,
        total: usize,
        limit: usize,
    },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("insufficient data: need at least {required} time steps, have {available}")]
    InsufficientData { required: usize, available: usize },

    #[error("adjacency error: {0}")]
    Adjacency(String),

    #[error("degenerate attention: denominator {value:e} on row {row}")]
    DegenerateAttention { row: usize, value: f64 },

    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("undefined metric: {0}")]
    UndefinedMetric(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("empty split: {0}")]
    EmptySplit(&'static str),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(context: &'static str, expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> Self {
        Error::Shape {
            context,
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }

    /// True for errors caused by bad inputs or configuration rather than runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Schema(_)
                | Error::Config(_)
                | Error::Shape { .. }
                | Error::InsufficientData { .. }
                | Error::Adjacency(_)
                | Error::Format(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
