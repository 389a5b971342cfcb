use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("matrix is not positive definite (last jitter tried: {jitter:e})")]
    Singular { jitter: f64 },

    #[error("column {column} is constant and cannot be scaled")]
    DegenerateColumn { column: usize },

    #[error("non-finite gradient at coordinate {index}")]
    NonFiniteGradient { index: usize },

    #[error("line search failed: {0}")]
    LineSearch(String),

    #[error("natural-gradient step could not keep the covariance positive definite")]
    NaturalGradientStep,

    #[error("{what} {index} has no observed entries")]
    Coverage { what: &'static str, index: usize },

    #[error("likelihood evaluation failed at theta = {theta:?}: {reason}")]
    Evaluation { theta: Vec<f64>, reason: String },

    #[error("inference failed: {0}")]
    Inference(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numerics rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Singular { .. }
                | Error::NonFiniteGradient { .. }
                | Error::LineSearch(_)
                | Error::NaturalGradientStep
                | Error::Evaluation { .. }
                | Error::Inference(_)
        )
    }
}
