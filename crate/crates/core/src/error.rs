use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vocabulary size must be at least 2, got {0}")]
    VocabularyTooSmall(usize),

    #[error("token {token} outside vocabulary of size {v}")]
    TokenOutOfRange { token: usize, v: usize },

    #[error("token {0} repeated in sequence")]
    RepeatedToken(usize),

    #[error("sequence of length {len} leaves no token free in vocabulary of size {v}")]
    DegenerateInput { len: usize, v: usize },

    #[error("requested length {len} exceeds vocabulary size {v}")]
    LengthExceedsVocabulary { len: usize, v: usize },

    #[error("empty input sequence")]
    EmptySequence,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("enumeration of {required} sequences at length {len} exceeds the cap of {cap}; use sampled mode")]
    EnumerationBudget { len: usize, required: u128, cap: u64 },

    #[error("illegal move {0}")]
    IllegalMove(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
