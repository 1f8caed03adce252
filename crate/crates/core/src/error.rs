use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("parse error in {path}: {message} (line {line}, column {column})")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("graph contains a cycle through edge {src} -> {dst}")]
    Cycle { src: u64, dst: u64 },

    #[error("infeasible placement: operator {op} ({weight_bytes} weight bytes) does not fit any candidate tile")]
    InfeasiblePlacement { op: u64, weight_bytes: u64 },

    #[error("unknown process node {0} nm (valid: 3, 5, 7, 10, 14, 22, 28)")]
    UnknownNode(u32),

    #[error("division by zero: {0}")]
    ZeroDivisor(&'static str),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}
