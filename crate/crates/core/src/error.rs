use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch in layer {layer}: {detail}")]
    Shape { layer: String, detail: String },

    #[error("backward called without a preceding training-mode forward pass")]
    BackwardWithoutForward,

    #[error("non-finite loss at epoch {epoch}, step {step}: {value}")]
    NonFiniteLoss { epoch: usize, step: usize, value: f64 },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("infeasible split: class {class}: {detail}")]
    InfeasibleSplit { class: u8, detail: String },

    #[error("data loader worker {worker} failed: {detail}")]
    Worker { worker: usize, detail: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable name of the error kind.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::MalformedHeader(_) => "malformed_header",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::TruncatedPayload { .. } => "truncated_payload",
            Error::InvalidData(_) => "invalid_data",
            Error::Config(_) => "config",
            Error::Shape { .. } => "shape",
            Error::BackwardWithoutForward => "backward_without_forward",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Empty(_) => "empty",
            Error::Metric(_) => "metric",
            Error::InfeasibleSplit { .. } => "infeasible_split",
            Error::Worker { .. } => "worker",
            Error::Json(_) => "schema",
        }
    }
}
