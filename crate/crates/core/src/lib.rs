//! Multibit text watermarking by binomial encoding.
//!
//! Every generated token carries evidence about every payload bit: the keyed
//! PRF assigns each candidate token one pseudorandom bit per payload bit, the
//! encoder scores candidates by how many of those bits agree with the message,
//! and a watermark scheme tilts sampling towards high scores. Decoding counts
//! agreements per bit, takes a majority vote and attaches exact binomial
//! p-values.

pub mod attacks;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod lm;
pub mod prf;
pub mod schemes;
pub mod stats;
pub mod types;

pub use decoder::{DecoderConfig, DetectionReport, Detector};
pub use encoder::{EncoderMode, EncoderState, StepScorer};
pub use error::{Error, Result};
pub use schemes::SchemeConfig;
pub use types::{Distribution, Message, Token, TokenSequence, Vocabulary, WatermarkKey};
