use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("masking error: query row {row} has no allowed keys")]
    Masking { row: usize },

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    Vocab { id: u32, vocab: usize },

    #[error("frame {got} appended out of order (expected {expected})")]
    Ordering { expected: u64, got: u64 },

    #[error("frame {0} not found")]
    NotFound(u64),

    #[error("frame {frame} is corrupted: {reason}")]
    Corruption { frame: u64, reason: String },

    #[error("storage error at {path}: {source}")]
    Storage {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("sequence of {tokens} tokens exceeds dense oracle capacity {limit}")]
    Capacity { tokens: usize, limit: usize },

    #[error("request queue is full ({capacity} pending)")]
    Backpressure { capacity: usize },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("no embedding for frame {0}")]
    MissingEmbedding(u64),

    #[error("trace spec error: {0}")]
    Spec(String),

    #[error("worker failed: {0}")]
    Worker(String),

    #[error("session closed")]
    Closed,

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn storage(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Storage {
            path: path.into(),
            source,
        }
    }
}
