use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two operands whose shapes cannot be combined.
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A single operand with an unusable shape.
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    Shape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn shape(op: &'static str, shape: &[usize], reason: impl Into<String>) -> Self {
        Error::Shape {
            op,
            shape: shape.to_vec(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the caller's arguments or configuration,
    /// as opposed to bad input data or I/O failures.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Dimension { .. }
                | Error::Shape { .. }
                | Error::Config(_)
                | Error::Usage(_)
                | Error::Numeric(_)
                | Error::Internal(_)
        )
    }
}
