use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("reference tensor has zero norm")]
    ZeroNorm,

    #[error("non-finite value at element {0}")]
    NonFinite(usize),

    #[error("count overflows 64 bits: {0}")]
    Overflow(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: Vec<u8> },

    #[error("truncated input: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Caller supplied parameters outside their domain.
    Usage,
    /// File could not be read or did not parse.
    Format,
    /// Inputs parsed but are numerically or dimensionally inconsistent.
    Numerical,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidArgument(_) => ErrorClass::Usage,
            Error::BadMagic { .. }
            | Error::Truncated { .. }
            | Error::Malformed(_)
            | Error::Io(_)
            | Error::Json(_) => ErrorClass::Format,
            Error::DimMismatch(_) | Error::ZeroNorm | Error::NonFinite(_) | Error::Overflow(_) => {
                ErrorClass::Numerical
            }
        }
    }
}
