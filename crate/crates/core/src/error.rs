//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch in {op}: left {left:?}, right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("numeric domain error in {op}: input contains {what}")]
    NumericDomain { op: &'static str, what: &'static str },
    #[error("empty reduction in {op}: axis of length zero")]
    EmptyReduction { op: &'static str },
    #[error("degenerate embedding: vector norm {norm:e} below threshold {threshold:e}")]
    DegenerateEmbedding { norm: f64, threshold: f64 },
    #[error("degenerate rollout: empty response")]
    DegenerateRollout,
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("optimizer contract violation: {0}")]
    OptimizerContract(String),
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },
    #[error("invalid anchor: {0}")]
    InvalidAnchor(String),
    #[error("sequence length {len} exceeds maximum {max}")]
    LengthExceeded { len: usize, max: usize },
    #[error("task generation exhausted: could not produce {needed} distinct prompts (got {got})")]
    GenerationExhausted { needed: usize, got: usize },
    #[error("checkpoint error in field `{field}`: {detail}")]
    Checkpoint { field: String, detail: String },
    #[error("config error: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("non-finite value in metrics field `{field}` at step {step}")]
    NumericFailure { step: u64, field: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
