use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("index {index} out of range (len {len})")]
    OutOfRange { index: usize, len: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("output directory is locked by another run: {}", .0.display())]
    Locked(PathBuf),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Failures while decoding a checkpoint file. Each variant maps to a stable
/// numeric code shared with the C interface.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes")]
    BadMagic,

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated checkpoint: {0}")]
    Truncated(String),

    #[error("tensor shape/offset inconsistency: {0}")]
    ShapeOffset(String),

    #[error("malformed header: {0}")]
    Header(String),
}

impl CheckpointError {
    pub fn code(&self) -> i32 {
        match self {
            CheckpointError::BadMagic => 10,
            CheckpointError::VersionMismatch { .. } => 11,
            CheckpointError::Truncated(_) => 12,
            CheckpointError::ShapeOffset(_) => 13,
            CheckpointError::Header(_) => 14,
        }
    }
}
