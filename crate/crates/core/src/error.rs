use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("index {index} out of range for length {len} ({context})")]
    IndexOutOfRange {
        index: usize,
        len: usize,
        context: &'static str,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("input too long: {0}")]
    InputTooLong(String),
    #[error("no context positions available for span prediction")]
    NoContext,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{path}:{line}: malformed record: {message}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit status for command-line front ends: 2 for configuration
    /// problems, 3 for data problems, 4 for violated invariants.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_)
            | Error::MalformedLine { .. }
            | Error::InputTooLong(_)
            | Error::NoContext
            | Error::Checkpoint(_)
            | Error::Io { .. }
            | Error::Json(_) => 3,
            Error::Shape { .. }
            | Error::InvalidDimension(_)
            | Error::IndexOutOfRange { .. }
            | Error::Contract(_)
            | Error::InvariantViolation(_) => 4,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
