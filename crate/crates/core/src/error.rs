use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("autodiff: {0}")]
    Autodiff(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("decode: {0}")]
    Decode(#[from] DecodeError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Failures while reading `.gkdm` model files or `.gkdd` dataset files.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated payload while reading {0}")]
    Truncated(&'static str),

    #[error("sparse indices of tensor {0} are not strictly increasing")]
    NonMonotoneSparse(String),

    #[error("sparse index out of range in tensor {0}")]
    SparseIndexOutOfRange(String),

    #[error("unknown tensor encoding tag {0}")]
    UnknownEncoding(u8),

    #[error("invalid descriptor: {0}")]
    Descriptor(String),

    #[error("invalid record: {0}")]
    Record(String),

    #[error("{0} trailing bytes after last record")]
    TrailingBytes(usize),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for errors caused by malformed files rather than bad arguments.
    pub fn is_format_error(&self) -> bool {
        matches!(self, Error::Decode(_) | Error::Io { .. })
    }
}
