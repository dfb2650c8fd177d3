//! Domain types shared by the encoder, the schemes and the decoder.
//!
//! Tokens are plain vocabulary indices (`u32`). No tokenizer is involved: every
//! algorithm in this crate operates on indices only.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Vocabulary token index.
pub type Token = u32;

/// Tolerance applied when ingesting externally supplied probability vectors.
pub const INGEST_SUM_TOLERANCE: f64 = 1e-6;
/// Tolerance guaranteed for distributions after internal normalization.
pub const NORMALIZED_SUM_TOLERANCE: f64 = 1e-9;

/// The m-bit payload. Bit `0` is the first (most significant) bit in textual
/// forms.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Message {
    bits: Vec<bool>,
}

impl Message {
    pub fn new(bits: Vec<bool>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::EmptyMessage);
        }
        Ok(Self { bits })
    }

    /// Builds a message from `0`/`1` values; any other value is an error.
    pub fn from_u8s(bits: &[u8]) -> Result<Self> {
        let bits = bits
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::InvalidParameter(format!("bit value {other}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(bits)
    }

    /// Parses a `0`/`1` string such as `"010"`.
    pub fn from_bit_str(s: &str) -> Result<Self> {
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(Error::InvalidParameter(format!("bit character {c:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(bits)
    }

    /// Takes the first `m` bits of `hex`, most significant bit first.
    pub fn from_hex(hex: &str, m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::EmptyMessage);
        }
        let mut bits = Vec::with_capacity(hex.len() * 4);
        for c in hex.chars() {
            let nibble = c
                .to_digit(16)
                .ok_or_else(|| Error::BadHex(hex.to_string()))?;
            for shift in (0..4).rev() {
                bits.push((nibble >> shift) & 1 == 1);
            }
        }
        if bits.len() < m {
            return Err(Error::TooShort {
                available: bits.len(),
                requested: m,
            });
        }
        bits.truncate(m);
        Self::new(bits)
    }

    /// Lowercase hex, MSB first, zero-padded to a whole nibble.
    pub fn to_hex(&self) -> String {
        self.bits
            .chunks(4)
            .map(|chunk| {
                let nibble = chunk
                    .iter()
                    .enumerate()
                    .fold(0u32, |acc, (j, &b)| acc | ((b as u32) << (3 - j)));
                std::char::from_digit(nibble, 16).unwrap()
            })
            .collect()
    }

    pub fn random<R: Rng + ?Sized>(m: usize, rng: &mut R) -> Result<Self> {
        Self::new((0..m).map(|_| rng.gen::<bool>()).collect())
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn bit(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn complement(&self) -> Self {
        Self {
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    /// Packs the bits little-endian into 64-bit words: bit `i` lives at
    /// position `i % 64` of word `i / 64`.
    pub fn words(&self) -> Vec<u64> {
        pack_bits(self.bits.iter().copied(), self.bits.len())
    }
}

pub(crate) fn pack_bits(bits: impl Iterator<Item = bool>, m: usize) -> Vec<u64> {
    let mut words = vec![0u64; words_for(m)];
    for (i, b) in bits.enumerate() {
        if b {
            words[i / 64] |= 1 << (i % 64);
        }
    }
    words
}

pub(crate) fn words_for(m: usize) -> usize {
    m.div_ceil(64)
}

/// Mask selecting the valid bits of a packed row of `m` bits.
pub(crate) fn full_mask(m: usize) -> Vec<u64> {
    let mut mask = vec![u64::MAX; words_for(m)];
    if !m.is_multiple_of(64) {
        *mask.last_mut().unwrap() = (1u64 << (m % 64)) - 1;
    }
    mask
}

impl fmt::Debug for Message {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Message(")?;
        for &b in &self.bits {
            write!(f, "{}", b as u8)?;
        }
        write!(f, ")")
    }
}

impl fmt::Display for Message {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.bits {
            write!(f, "{}", b as u8)?;
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MessageRepr {
    hex: String,
    bits: usize,
}

impl Serialize for Message {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        MessageRepr {
            hex: self.to_hex(),
            bits: self.len(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Message {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let repr = MessageRepr::deserialize(deserializer)?;
        Message::from_hex(&repr.hex, repr.bits).map_err(serde::de::Error::custom)
    }
}

/// Vocabulary of `size` tokens `0..size`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct Vocabulary(usize);

impl Vocabulary {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 || size >= u32::MAX as usize {
            return Err(Error::VocabularyTooSmall(size));
        }
        Ok(Self(size))
    }

    pub fn size(&self) -> usize {
        self.0
    }

    /// Reserved id used to pad contexts at the start of a sequence.
    pub fn sentinel(&self) -> Token {
        self.0 as Token
    }
}

impl TryFrom<usize> for Vocabulary {
    type Error = Error;
    fn try_from(size: usize) -> Result<Self> {
        Self::new(size)
    }
}

impl From<Vocabulary> for usize {
    fn from(v: Vocabulary) -> usize {
        v.0
    }
}

/// A probability vector over the vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    /// Validates an externally supplied probability vector and renormalizes it.
    ///
    /// Sums further than `1e-6` from one are rejected rather than silently fixed.
    pub fn validate(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::EmptyDistribution);
        }
        for (index, &value) in probs.iter().enumerate() {
            if !value.is_finite() {
                return Err(Error::NonFiniteEntry { index });
            }
            if value < 0.0 {
                return Err(Error::NegativeEntry { index, value });
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > INGEST_SUM_TOLERANCE {
            return Err(Error::SumNotOne { sum });
        }
        Ok(Self::normalized(probs, sum))
    }

    /// Normalizes non-negative weights. Used internally where the weights are
    /// known to be valid and positive in total.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::EmptyDistribution);
        }
        for (index, &value) in weights.iter().enumerate() {
            if !value.is_finite() {
                return Err(Error::NonFiniteEntry { index });
            }
            if value < 0.0 {
                return Err(Error::NegativeEntry { index, value });
            }
        }
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 {
            return Err(Error::SumNotOne { sum });
        }
        Ok(Self::normalized(weights, sum))
    }

    pub fn uniform(size: usize) -> Self {
        Self {
            probs: vec![1.0 / size as f64; size],
        }
    }

    pub fn one_hot(size: usize, token: Token) -> Self {
        let mut probs = vec![0.0; size];
        probs[token as usize] = 1.0;
        Self { probs }
    }

    fn normalized(mut probs: Vec<f64>, sum: f64) -> Self {
        if sum != 1.0 {
            probs.iter_mut().for_each(|p| *p /= sum);
        }
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Tokens with non-zero probability, in index order.
    pub fn support(&self) -> Vec<Token> {
        self.probs
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(u, _)| u as Token)
            .collect()
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }

    /// Draws a token by inversion.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Token {
        sample_index(&self.probs, rng) as Token
    }
}

pub(crate) fn sample_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut target = rng.gen::<f64>() * total;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            if target < w {
                return i;
            }
            target -= w;
            last_positive = i;
        }
    }
    last_positive
}

impl TryFrom<Vec<f64>> for Distribution {
    type Error = Error;
    fn try_from(probs: Vec<f64>) -> Result<Self> {
        Self::validate(probs)
    }
}

impl From<Distribution> for Vec<f64> {
    fn from(d: Distribution) -> Vec<f64> {
        d.probs
    }
}

/// An ordered list of tokens, every one inside a known vocabulary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(Vec<Token>);

impl TokenSequence {
    pub fn new(tokens: Vec<Token>, vocab: Vocabulary) -> Result<Self> {
        if let Some((position, &token)) = tokens
            .iter()
            .enumerate()
            .find(|(_, &t)| t as usize >= vocab.size())
        {
            return Err(Error::TokenOutOfRange {
                token,
                position,
                vocab: vocab.size(),
            });
        }
        Ok(Self(tokens))
    }

    /// Wraps tokens without checking them against a vocabulary.
    pub fn from_raw(tokens: Vec<Token>) -> Self {
        Self(tokens)
    }

    pub fn tokens(&self) -> &[Token] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<Token> {
        self.0
    }
}

/// Fills `out` with the `k` tokens preceding position `t`, oldest first.
/// Positions before the start of the sequence hold `sentinel`.
pub fn context_window(tokens: &[Token], t: usize, k: usize, sentinel: Token, out: &mut Vec<Token>) {
    out.clear();
    for back in (1..=k).rev() {
        out.push(if t >= back {
            tokens[t - back]
        } else {
            sentinel
        });
    }
}

/// The 256-bit watermark secret plus the hashing context width.
#[derive(Clone, PartialEq, Eq)]
pub struct WatermarkKey {
    key: [u8; 32],
    context_window: usize,
}

impl WatermarkKey {
    pub const DEFAULT_CONTEXT_WINDOW: usize = 3;

    pub fn new(key: [u8; 32], context_window: usize) -> Result<Self> {
        if context_window == 0 {
            return Err(Error::BadContextWindow);
        }
        Ok(Self {
            key,
            context_window,
        })
    }

    pub fn from_hex(hex_key: &str, context_window: usize) -> Result<Self> {
        let bytes = hex::decode(hex_key.trim()).map_err(|_| Error::BadKey)?;
        let key: [u8; 32] = bytes.try_into().map_err(|_| Error::BadKey)?;
        Self::new(key, context_window)
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut key = [0u8; 32];
        rng.fill(&mut key);
        Self {
            key,
            context_window: Self::DEFAULT_CONTEXT_WINDOW,
        }
    }

    pub fn with_context_window(mut self, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::BadContextWindow);
        }
        self.context_window = k;
        Ok(self)
    }

    pub fn bytes(&self) -> &[u8; 32] {
        &self.key
    }

    pub fn context_window(&self) -> usize {
        self.context_window
    }
}

impl fmt::Debug for WatermarkKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("WatermarkKey")
            .field("key", &"<redacted>")
            .field("context_window", &self.context_window)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn validate_accepts_uniform_and_one_hot() {
        assert!(Distribution::validate(vec![0.5, 0.5]).is_ok());
        let d = Distribution::validate(vec![1.0, 0.0]).unwrap();
        assert_eq!(d.support(), vec![0]);
    }

    #[test]
    fn validate_rejects_bad_sums_and_entries() {
        assert!(matches!(
            Distribution::validate(vec![0.6, 0.6]),
            Err(Error::SumNotOne { .. })
        ));
        assert!(matches!(
            Distribution::validate(vec![1.5, -0.5]),
            Err(Error::NegativeEntry { index: 1, .. })
        ));
        assert_eq!(
            Distribution::validate(vec![]),
            Err(Error::EmptyDistribution)
        );
    }

    #[test]
    fn validate_renormalizes_within_ingest_tolerance() {
        let d = Distribution::validate(vec![0.5 + 4e-7, 0.5]).unwrap();
        let sum: f64 = d.probs().iter().sum();
        assert!((sum - 1.0).abs() < NORMALIZED_SUM_TOLERANCE);
    }

    #[test]
    fn hex_examples() {
        assert_eq!(Message::from_hex("a", 4).unwrap().to_string(), "1010");
        assert_eq!(Message::from_hex("ff", 8).unwrap().to_string(), "11111111");
        assert_eq!(
            Message::from_hex("0", 5),
            Err(Error::TooShort {
                available: 4,
                requested: 5
            })
        );
        assert!(matches!(Message::from_hex("xz", 4), Err(Error::BadHex(_))));
    }

    #[test]
    fn hex_pads_trailing_nibble() {
        let m = Message::from_bit_str("10110").unwrap();
        assert_eq!(m.to_hex(), "b0");
        assert_eq!(Message::from_hex(&m.to_hex(), 5).unwrap(), m);
    }

    #[test]
    fn message_serde_uses_hex_and_length() {
        let m = Message::from_bit_str("1010").unwrap();
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(json, r#"{"hex":"a","bits":4}"#);
        let back: Message = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn packed_words_match_bits() {
        let bits: Vec<bool> = (0..70).map(|i| i % 3 == 0).collect();
        let m = Message::new(bits.clone()).unwrap();
        let words = m.words();
        for (i, &b) in bits.iter().enumerate() {
            assert_eq!((words[i / 64] >> (i % 64)) & 1 == 1, b);
        }
        assert_eq!(full_mask(70), vec![u64::MAX, (1 << 6) - 1]);
    }

    #[test]
    fn key_debug_is_redacted() {
        let key = WatermarkKey::new([7u8; 32], 3).unwrap();
        assert!(!format!("{key:?}").contains('7'));
        assert!(WatermarkKey::from_hex("abcd", 3).is_err());
        assert_eq!(WatermarkKey::new([0; 32], 0), Err(Error::BadContextWindow));
    }

    #[test]
    fn token_sequence_checks_range() {
        let v = Vocabulary::new(4).unwrap();
        assert!(TokenSequence::new(vec![0, 3], v).is_ok());
        assert!(matches!(
            TokenSequence::new(vec![0, 4], v),
            Err(Error::TokenOutOfRange { position: 1, .. })
        ));
        assert!(Vocabulary::new(1).is_err());
    }

    #[test]
    fn context_window_pads_with_sentinel() {
        let mut ctx = Vec::new();
        context_window(&[5, 6, 7], 0, 3, 99, &mut ctx);
        assert_eq!(ctx, vec![99, 99, 99]);
        context_window(&[5, 6, 7], 2, 3, 99, &mut ctx);
        assert_eq!(ctx, vec![99, 5, 6]);
        context_window(&[5, 6, 7, 8], 3, 2, 99, &mut ctx);
        assert_eq!(ctx, vec![6, 7]);
    }

    proptest! {
        #[test]
        fn hex_round_trip(bytes in proptest::collection::vec(any::<u8>(), 1..9), m in 1usize..=64) {
            let hex = hex::encode(&bytes);
            prop_assume!(m <= hex.len() * 4);
            let msg = Message::from_hex(&hex, m).unwrap();
            let again = Message::from_hex(&msg.to_hex(), m).unwrap();
            prop_assert_eq!(&again, &msg);
            // first m bits of the original hex
            let all = Message::from_hex(&hex, hex.len() * 4).unwrap();
            prop_assert_eq!(&all.bits()[..m], msg.bits());
        }

        #[test]
        fn validate_is_idempotent(weights in proptest::collection::vec(0.0f64..10.0, 1..40)) {
            prop_assume!(weights.iter().sum::<f64>() > 1e-6);
            let d = Distribution::from_weights(weights).unwrap();
            let again = Distribution::validate(d.probs().to_vec()).unwrap();
            for (a, b) in d.probs().iter().zip(again.probs()) {
                prop_assert!((a - b).abs() < 1e-15);
            }
        }
    }
}
