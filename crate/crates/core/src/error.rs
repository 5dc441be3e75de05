use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("backward requires a tracked scalar loss, got {0}")]
    Backward(String),

    #[error("non-finite value in `{tensor}` ({context})")]
    NonFinite { tensor: String, context: String },

    #[error(transparent)]
    Weights(#[from] WeightFileError),

    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Failures specific to the weight file format.
#[derive(Debug, Error)]
pub enum WeightFileError {
    #[error("bad magic bytes {found:?}, expected \"FKCD\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("malformed header: {0}")]
    Header(String),

    #[error("shape mismatch for `{name}`: file has {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("missing tensor `{0}`")]
    Missing(String),

    #[error("unexpected tensor `{0}`")]
    Unexpected(String),

    #[error("duplicate tensor name `{0}`")]
    Duplicate(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("{0} trailing bytes after payload")]
    Trailing(usize),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
