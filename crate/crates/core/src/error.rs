use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failures while decoding one of the binary file formats.
///
/// Every variant is reachable from untrusted bytes; decoders never panic.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("unsupported dtype code {0} (only 0 = f32 is defined)")]
    UnsupportedDtype(u8),
    #[error("truncated input: needed {needed} bytes, have {available}")]
    Truncated { needed: u64, available: u64 },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(u64),
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("non-finite value at element {0}")]
    NonFinite(usize),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {op} got {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("non-finite input to {0}")]
    NonFinite(&'static str),
    #[error("attention map of {requested} elements exceeds the cap of {cap}")]
    SizeCap { requested: u128, cap: u128 },
    #[error("invalid layout: {0}")]
    Layout(String),
    #[error("invalid policy: {0}")]
    Policy(String),
    #[error("geometry mismatch: {0}")]
    Geometry(String),
    #[error("index {index} out of range for {len} tokens")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
