use thiserror::Error;

use crate::container::StreamKind;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("exponent {0} is not in the codebook")]
    UnknownSymbol(u8),

    #[error("truncated stream: decoded {decoded} of {expected} symbols")]
    TruncatedStream { decoded: usize, expected: usize },

    #[error("unary codeword of rank {rank} exceeds codebook of {len} symbols")]
    InvalidCodeword { rank: usize, len: usize },

    #[error("at least one element must be kept for speculation")]
    EmptySpeculation,

    #[error("bad magic: {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),

    #[error("corrupt container: {0}")]
    Corrupt(String),

    #[error("out-of-order block: expected {expected:?}, got {actual:?}")]
    OutOfOrderBlock {
        expected: StreamKind,
        actual: StreamKind,
    },

    #[error("decoder buffer for {kind:?} holds {bytes} bytes, limit is 256")]
    BufferOverflow { kind: StreamKind, bytes: usize },

    #[error("missing superblock {0}")]
    MissingSuperblock(u32),

    #[error("duplicate superblock {0}")]
    DuplicateSuperblock(u32),

    #[error("context of {needed} tokens exceeds maximum sequence length {max}")]
    ContextOverflow { needed: usize, max: usize },

    #[error("token {token} out of vocabulary of size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("objective denominator is zero")]
    ZeroDenominator,
}

impl Error {
    /// True for errors caused by malformed or corrupted encoded data, as
    /// opposed to bad caller input.
    pub fn is_format_error(&self) -> bool {
        matches!(
            self,
            Error::TruncatedStream { .. }
                | Error::InvalidCodeword { .. }
                | Error::BadMagic(_)
                | Error::UnsupportedVersion(_)
                | Error::Corrupt(_)
                | Error::OutOfOrderBlock { .. }
                | Error::BufferOverflow { .. }
                | Error::MissingSuperblock(_)
                | Error::DuplicateSuperblock(_)
        )
    }
}
