use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied parameter is out of its admissible range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Input data violates a precondition (non-finite values, mismatched init weights, ...).
    #[error("input error: {0}")]
    Input(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    /// The quantity is undefined for this input (e.g. stable rank of a zero matrix).
    #[error("undefined for input: {0}")]
    Undefined(String),

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(String),

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

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}

/// Failures while decoding a tensor container file.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic bytes {0:?}, expected \"UMTK\"")]
    BadMagic([u8; 4]),

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u16),

    #[error("file truncated: {0}")]
    Truncated(String),

    #[error("tensor range out of bounds: {0}")]
    Bounds(String),

    #[error("malformed header: {0}")]
    Header(String),

    #[error("checksum mismatch: file contents do not match the recorded digest")]
    Checksum,

    #[error("missing required tensor `{0}`")]
    MissingTensor(String),

    #[error("{0} unexpected trailing bytes after payload")]
    TrailingData(usize),
}
