use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by calibration, decoding and the bound calculators.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("trace `{id}`: {message}")]
    Validation { id: String, message: String },

    #[error("duplicate trace id `{0}`")]
    DuplicateId(String),

    #[error("operation not supported: {0}")]
    Unsupported(&'static str),

    #[error("coverage constraint is infeasible: {0}")]
    Infeasible(String),

    #[error("decomposition audit failed at step {step}, cluster {cluster}: {message}")]
    Audit {
        step: usize,
        cluster: String,
        message: String,
    },

    #[error("calibration and evaluation sets overlap (shared id `{0}`)")]
    Overlap(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Infeasible(_) => 3,
            Error::Io(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
