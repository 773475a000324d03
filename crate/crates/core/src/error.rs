//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input violated a documented precondition.
    #[error("invalid input: {0}")]
    Validation(String),

    /// Tensor shapes are incompatible for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A loss or activation became NaN/inf during training.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("fvol format error in {path}: {kind}")]
    Format { path: PathBuf, kind: FormatError },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Pipeline stage cannot run because an upstream artifact is absent.
    #[error("missing dependency for stage `{stage}`: {missing}")]
    MissingDependency { stage: String, missing: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(String),
}

/// Distinct failure kinds when decoding an FVOL file.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormatError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("truncated header")]
    TruncatedHeader,
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported dtype `{0}`")]
    UnsupportedDtype(String),
    #[error("payload size mismatch: expected {expected} bytes, found {found}")]
    PayloadSizeMismatch { expected: usize, found: usize },
    #[error("shape/dtype mismatch: {0}")]
    ShapeMismatch(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
