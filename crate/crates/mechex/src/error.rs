//! Crate-wide error type and result alias.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer shape disagreement.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Invalid or inconsistent experiment configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Missing or unusable data on disk.
    #[error("data error ({path}): {detail}")]
    Data { path: PathBuf, detail: String },

    /// Malformed binary file (IDX, checkpoint) with the offending byte offset.
    #[error("parse error in {path} at byte {offset}: {detail}")]
    Parse {
        path: PathBuf,
        offset: u64,
        detail: String,
    },

    /// Non-finite values detected during training; the run must stop.
    #[error("numeric abort in {network} at iteration {iteration}: {detail}")]
    Numeric {
        network: String,
        iteration: u64,
        detail: String,
    },

    /// API misuse (e.g. backward from a non-scalar loss).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Process exit code used by the CLI: 2 config, 3 data, 4 numeric, 1 other.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data { .. } | Error::Parse { .. } => 3,
            Error::Numeric { .. } => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
