//! Error type shared across the crate.

use thiserror::Error;

/// Snapshot of the training state at the moment of a numerical failure.
#[derive(Debug, Clone, serde::Serialize)]
pub struct TrainDiagnostics {
    pub epoch: usize,
    pub step: usize,
    pub ce: f64,
    pub pos: f64,
    pub neg_sample: f64,
    pub neg_class: f64,
    pub total: f64,
    pub learning_rate: f64,
    pub parameter_norms: Vec<f64>,
    pub prototype_norms: Vec<f64>,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("degenerate prototype: {0}")]
    DegeneratePrototype(String),

    #[error("numerical failure: {message}")]
    Numerical {
        message: String,
        diagnostics: Option<Box<TrainDiagnostics>>,
    },

    #[error("unsupported dimension: {0}")]
    UnsupportedDimension(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn numerical(message: impl Into<String>) -> Self {
        Error::Numerical {
            message: message.into(),
            diagnostics: None,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
