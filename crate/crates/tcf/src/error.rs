//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TcfError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("clustering: {0}")]
    Clustering(String),

    #[error("part {part} of {parts} received no tokens")]
    EmptyPart { part: usize, parts: usize },

    #[error("config: {0}")]
    Config(String),

    #[error("weights: {0}")]
    Weights(String),

    #[error("missing weight tensors: {0}")]
    MissingWeights(String),

    #[error("ppm: {0}")]
    Ppm(String),

    #[error("csv: {0}")]
    Csv(String),

    #[error("cli: {0}")]
    Cli(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TcfError>;
