//! Crate-wide error type and exit-code mapping for the CLI.

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A scene with no detections cannot form a graph.
    #[error("empty scene")]
    EmptyScene,

    /// Feature vectors or tensor shapes do not line up.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// The primitive graph has no edges, so there is nothing to dualize.
    #[error("no relations to dualize")]
    NoRelations,

    /// Tensor operation called with incompatible shapes.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Bad argument to an operation (unknown id, invalid K, lr <= 0, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Invalid configuration file or field.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or inconsistent input data.
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite values encountered where finite math is required.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code: 1 usage error, 2 data error, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) => 1,
            Error::Numerical(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
