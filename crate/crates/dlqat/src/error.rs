//! Error types shared across the crate.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// A forward result contained NaN or Inf. Non-finite values are an
    /// error condition, never silent tensor state.
    #[error("non-finite values produced by {op}")]
    NonFinite { op: &'static str },

    #[error("division by zero in elementwise div")]
    DivisionByZero,

    #[error("index out of range in {op}: {detail}")]
    IndexOutOfRange { op: &'static str, detail: String },

    /// Misuse of the autodiff graph or a layer API (backward on a
    /// non-scalar, backward twice without reset, phase/setting mismatch).
    #[error("invalid operation: {0}")]
    Invalid(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("corpus error: {0}")]
    Data(String),

    #[error(transparent)]
    Pack(#[from] PackError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}

/// Pack-file failures. Each corruption class is a distinct variant so
/// callers (and exit codes) can tell them apart.
#[derive(Debug, PartialEq, Eq, thiserror::Error)]
pub enum PackError {
    #[error("bad magic: not a DLQT pack file")]
    BadMagic,
    #[error("unsupported pack format version {0}")]
    BadVersion(u16),
    #[error("truncated pack data: {0}")]
    Truncated(String),
    #[error("crc mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("tensor {0:?} not present in pack file")]
    UnknownTensor(String),
    #[error("malformed pack data: {0}")]
    Malformed(String),
}
