use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A record parsed but violates a dataset invariant.
    #[error("{message} at line {line} (field `{field}`)")]
    Invalid {
        line: usize,
        field: &'static str,
        message: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("generator fit reached flip ratio {achieved:.4} after {steps} steps (target {target:.4}, tolerance {tolerance})")]
    GeneratorFit {
        achieved: f64,
        target: f64,
        tolerance: f64,
        steps: usize,
    },

    #[error("dataset already carries corruption records; refusing to corrupt twice")]
    AlreadyCorrupted,

    #[error("training diverged at step {step} ({phase}): loss = {loss}")]
    Diverged {
        step: usize,
        phase: &'static str,
        loss: f64,
        /// Parameters just before the offending step.
        snapshot: Box<DivergenceSnapshot>,
    },

    #[error("policy not converged: gradient norm {grad_norm:e} exceeds {threshold:e}")]
    NotConverged { grad_norm: f64, threshold: f64 },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

/// Model state attached to a divergence error.
#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceSnapshot {
    pub logits: Vec<f64>,
    pub omega: Vec<f64>,
}

pub type Result<T> = std::result::Result<T, Error>;
