use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value at position {index}")]
    NonFinite { index: usize },

    #[error("top_k must lie in 1..={num_experts}, got {k}")]
    InvalidTopK { k: usize, num_experts: usize },

    #[error("rank {rank} out of range for top_k = {k}")]
    RankOutOfRange { rank: usize, k: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("shape mismatch for {what}: expected {expected}, found {found}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("retained expert set is empty")]
    EmptyRetainedSet,

    #[error("no unselected expert is available to substitute (top_k == num_experts)")]
    NoSubstitute,

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
