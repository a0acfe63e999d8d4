use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read audio from {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },

    #[error("audio input {0} contains no samples")]
    EmptyInput(String),

    #[error("cannot normalize {source_id}: {reason}")]
    Normalization { source_id: String, reason: String },

    #[error("split error: {0}")]
    Split(String),

    #[error("batching error: {0}")]
    Batching(String),

    #[error("pairing error: {0}")]
    Pairing(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in input at index {index}")]
    NonFiniteInput { index: usize },

    #[error("shape error in {component}: {reason}")]
    Shape { component: String, reason: String },

    #[error("logit topology mismatch: {0}")]
    Topology(String),

    #[error("ESR is undefined for a zero-energy target")]
    UndefinedEsr,

    #[error("metric error: {0}")]
    Metric(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("embedder failed on {source_id}: {reason}")]
    Embedder { source_id: String, reason: String },

    #[error("training diverged at step {step}: {reason}; last good checkpoint: {checkpoint:?}")]
    Divergence {
        step: u64,
        reason: String,
        checkpoint: Option<PathBuf>,
    },

    #[error("checkpoint config digest {found} does not match current config digest {expected}")]
    DigestMismatch { expected: String, found: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
