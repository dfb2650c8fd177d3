use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("distribution is empty")]
    EmptyDistribution,
    #[error("distribution entry {index} is negative ({value})")]
    NegativeEntry { index: usize, value: f64 },
    #[error("distribution entry {index} is not finite")]
    NonFiniteEntry { index: usize },
    #[error("distribution sums to {sum}, expected 1")]
    SumNotOne { sum: f64 },
    #[error("invalid hex string: {0}")]
    BadHex(String),
    #[error("hex string encodes {available} bits, {requested} requested")]
    TooShort { available: usize, requested: usize },
    #[error("message must have at least one bit")]
    EmptyMessage,
    #[error("vocabulary must contain at least two tokens, got {0}")]
    VocabularyTooSmall(usize),
    #[error("token {token} at position {position} is outside the vocabulary of size {vocab}")]
    TokenOutOfRange {
        token: u32,
        position: usize,
        vocab: usize,
    },
    #[error("watermark key must be 64 hex characters")]
    BadKey,
    #[error("context window must be at least 1")]
    BadContextWindow,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("no token positions left after deduplication")]
    EmptyAfterDedup,
    #[error("token {position} has zero probability under the language model")]
    ZeroProbabilityToken { position: usize },
    #[error("illegal configuration: {0}")]
    IllegalCombination(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
}
