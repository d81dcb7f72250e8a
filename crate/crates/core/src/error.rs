use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("initialization error: {0}")]
    Initialization(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),

    #[error("file not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error("i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    /// Short stable identifier, used in machine-parsable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Ingestion(_) => "ingestion",
            Error::Shape(_) => "shape",
            Error::Contract(_) => "contract",
            Error::Evaluation(_) => "evaluation",
            Error::Initialization(_) => "initialization",
            Error::Checkpoint(_) => "checkpoint",
            Error::ManifestMismatch(_) => "manifest_mismatch",
            Error::NotFound(_) => "not_found",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
