//! Error type shared across the crate.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes for an operation. Carries both shapes.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An API contract was violated (non-scalar loss, bad probability, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A vector with near-zero norm was passed where a direction is required.
    #[error("degenerate vector: norm {norm:.3e} below epsilon {eps:.1e}")]
    Degenerate { norm: f64, eps: f64 },

    /// Token or answer lookup outside the vocabulary.
    #[error("vocabulary error: {0}")]
    Vocab(String),

    /// Malformed caller input (empty question, empty lexicon, ...).
    #[error("input error: {0}")]
    Input(String),

    /// A binary container failed to parse; offset points at the failure.
    #[error("format error in {path}: {msg} (byte offset {offset})")]
    Format {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    /// Semantically invalid data (box with x1 >= x2, target outside [0,1], ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// Invalid experiment configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Dataset-level problem (missing file, inconsistent manifest, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Numeric failure: NaN loss, failed gradient check, overflow.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Two identical forward passes disagreed during finite differencing.
    #[error("non-deterministic function under finite differencing: {0}")]
    Determinism(String),

    /// Scene layout could not be satisfied within the retry budget.
    #[error("scene generation failed: {0}")]
    Generation(String),

    /// A graph was requested over zero objects.
    #[error("empty scene: a graph needs at least one object")]
    EmptyScene,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
