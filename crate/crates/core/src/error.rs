//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate geometry: {0}")]
    Geometry(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("not estimable: {0}")]
    NotEstimable(String),
    #[error("training failure: {0}")]
    TrainingFailure(String),
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 config, 3 numeric, 4 io.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 2,
            Error::Numeric(_) | Error::TrainingFailure(_) => 3,
            Error::Io(_) | Error::Image(_) | Error::Json(_) | Error::Checkpoint(_) => 4,
            _ => 2,
        }
    }
}
