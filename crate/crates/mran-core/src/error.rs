use thiserror::Error;

/// Errors produced by the tensor engine, models, data pipeline and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("format error in {path}: {kind}")]
    Format { path: String, kind: FormatErrorKind },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("checkpoint incompatible with requested operation: {0}")]
    Incompatible(String),
}

/// Distinct failure modes when decoding binary containers.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatErrorKind {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {0}")]
    BadVersion(u32),
    #[error("truncated payload")]
    Truncated,
    #[error("extent/byte-count disagreement for tensor `{0}`")]
    ExtentMismatch(String),
    #[error("tensor name is not valid UTF-8")]
    BadName,
    #[error("missing required entry `{0}`")]
    MissingEntry(String),
    #[error("malformed header field: {0}")]
    BadHeader(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<String>, kind: FormatErrorKind) -> Self {
        Error::Format {
            path: path.into(),
            kind,
        }
    }

    pub fn shape(context: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.into(),
            got: got.into(),
        }
    }
}
