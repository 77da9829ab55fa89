use std::io;

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty logits")]
    EmptyLogits,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("not positive definite (pivot {pivot} = {value})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("degenerate covariance (shrinkage {shrinkage} exhausted)")]
    DegenerateCovariance { shrinkage: f64 },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("tape: {0}")]
    Tape(String),

    #[error("crop exceeds spectrum: radius {radius} needs {side}x{side} but image is {height}x{width}")]
    CropExceedsSpectrum {
        radius: usize,
        side: usize,
        height: usize,
        width: usize,
    },

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("empty registry")]
    EmptyRegistry,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("unknown domain branch {id} (pool has {len})")]
    UnknownDomainBranch { id: usize, len: usize },

    #[error("negative probability {0}")]
    NegativeProbability(f64),

    #[error("empty evaluation set")]
    EmptyEvaluationSet,

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("unknown corruption kind `{0}`")]
    UnknownCorruption(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("injected fault at {0}")]
    InjectedFault(&'static str),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
