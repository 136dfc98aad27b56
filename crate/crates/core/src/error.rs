use thiserror::Error;

/// Errors shared across the tensor engine, simulator, and detector harness.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    /// A spatial geometry constraint was violated (computed output size < 1,
    /// empty spatial extent, non-square spectrum input, ...).
    #[error("geometry error: {0}")]
    Geometry(String),
    /// Channel split requested with a part count that does not divide C.
    #[error("channel count {channels} not divisible into {parts} parts")]
    Divisibility { channels: usize, parts: usize },
    #[error("config error: {0}")]
    Config(String),
    /// Non-finite values where finite ones are required.
    #[error("value error: {0}")]
    Value(String),
    #[error("parse error: {0}")]
    Parse(String),
    /// Fusion-graph construction referenced an absent level or edge.
    #[error("topology error: {0}")]
    Topology(String),
    /// Scene synthesis could not place an object within the retry budget.
    #[error("generation error: {0}")]
    Generation(String),
    #[error("training error: {0}")]
    Training(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
