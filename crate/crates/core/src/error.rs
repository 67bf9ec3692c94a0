use std::io;

use thiserror::Error;

/// Errors produced by the quantization library and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("capacity exceeded: requested {requested} codewords but only {available} are available")]
    CapacityExceeded { requested: usize, available: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(msg.into())
    }

    /// Process exit code used by the command line front-end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::CapacityExceeded { .. } => 2,
            Error::Parse(_)
            | Error::UnsupportedFormat(_)
            | Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
