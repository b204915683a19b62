use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("schema error at entry {index}: {message}")]
    Schema { index: usize, message: String },

    #[error("network error: {0}")]
    Network(String),

    #[error("provider error: {0}")]
    Provider(String),

    #[error("rate limited by provider, retry after {retry_after_ms} ms")]
    RateLimited { retry_after_ms: u64 },

    #[error("missing data: {}", .fields.join(", "))]
    MissingData { fields: Vec<String> },

    #[error("unknown metric key `{0}`")]
    UnknownMetric(String),

    #[error("estimate is zero, surprise undefined")]
    DegenerateEstimate,

    #[error("invalid price: open={open}, close={close}")]
    InvalidPrice { open: f64, close: f64 },

    #[error("non-finite input value at element {0}")]
    NonFiniteInput(usize),

    #[error("corrupt tensor: {0}")]
    CorruptTensor(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid rank {rank} for a {d}x{k} weight")]
    InvalidRank { rank: usize, d: usize, k: usize },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("sequence of length {len} exceeds limit {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("loss mask selects no positions")]
    EmptyMask,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("non-finite loss at optimizer step {step}")]
    NonFiniteLoss { step: usize },

    #[error("length mismatch: {preds} predictions vs {golds} gold labels")]
    LengthMismatch { preds: usize, golds: usize },

    #[error("no samples to score")]
    Empty,

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable code printed by the CLI on failure.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "IO_ERROR",
            Error::Schema { .. } => "SCHEMA_ERROR",
            Error::Network(_) => "NETWORK_ERROR",
            Error::Provider(_) => "PROVIDER_ERROR",
            Error::RateLimited { .. } => "RATE_LIMITED",
            Error::MissingData { .. } => "MISSING_DATA",
            Error::UnknownMetric(_) => "UNKNOWN_METRIC",
            Error::DegenerateEstimate => "DEGENERATE_ESTIMATE",
            Error::InvalidPrice { .. } => "INVALID_PRICE",
            Error::NonFiniteInput(_) => "NON_FINITE_INPUT",
            Error::CorruptTensor(_) => "CORRUPT_TENSOR",
            Error::ShapeMismatch(_) => "SHAPE_MISMATCH",
            Error::InvalidRank { .. } => "INVALID_RANK",
            Error::EmptyCorpus => "EMPTY_CORPUS",
            Error::SequenceTooLong { .. } => "SEQUENCE_TOO_LONG",
            Error::EmptyMask => "EMPTY_MASK",
            Error::EmptyDataset => "EMPTY_DATASET",
            Error::NonFiniteLoss { .. } => "NON_FINITE_LOSS",
            Error::LengthMismatch { .. } => "LENGTH_MISMATCH",
            Error::Empty => "EMPTY",
            Error::Config(_) => "CONFIG_ERROR",
            Error::Checkpoint(_) => "CHECKPOINT_ERROR",
            Error::Json(_) => "JSON_ERROR",
        }
    }
}
