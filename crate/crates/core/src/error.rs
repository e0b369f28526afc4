//! Crate-wide error type.

use thiserror::Error;

/// Result alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left {left:?} vs right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{what} must be non-empty")]
    EmptyInput { what: &'static str },

    #[error("index {index} out of range for {what} of size {size}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: (usize, usize) },

    #[error("input too short: {len} acoustic frames, frontend needs at least {min}")]
    InputTooShort { len: usize, min: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("cross-attention memory is empty")]
    EmptyMemory,

    #[error("segment of {len} encoding frames exceeds positional table size {p_max}")]
    SegmentTooLong { len: usize, p_max: usize },

    #[error("streaming chunk of {len} acoustic frames is not a multiple of {unit}")]
    MisalignedChunk { len: usize, unit: usize },

    #[error("CTC target needs {needed} frames but lattice has only {frames}")]
    InfeasibleAlignment { needed: usize, frames: usize },

    #[error("segment [{t_b}, {t_e}] is empty or out of range for {frames} frames")]
    BadSegment { t_b: usize, t_e: usize, frames: usize },

    #[error(
        "checkpoint architecture hash {found} does not match configured architecture {expected}"
    )]
    CheckpointMismatch { expected: String, found: String },

    #[error("malformed checkpoint: {0}")]
    CheckpointFormat(String),

    #[error("training diverged: loss is not finite at update {update} (lr {lr:.3e}, grad norm {grad_norm:.3e})")]
    NanLoss {
        update: usize,
        lr: f64,
        grad_norm: f64,
    },

    #[error("corpus format: {0}")]
    CorpusFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config parse: {0}")]
    TomlParse(#[from] toml::de::Error),
}
