//! Keyed pseudorandom scoring.
//!
//! Two keyed BLAKE3 calls make up the PRF. Their byte layout is frozen:
//!
//! * context seed: `BLAKE3-keyed(key, 0x00 ‖ k:u32le ‖ ctx[0]:u32le ‖ … ‖ ctx[k-1]:u32le)`,
//!   truncated to its first 16 bytes (little-endian `u128`). Short contexts are
//!   left-padded with the sentinel id `|Σ|`.
//! * score word: `BLAKE3-keyed(seed:u128le ‖ SCORE_DOMAIN, 0x01 ‖ u:u32le ‖ block:u32le ‖ layer:u32le)`,
//!   first 8 bytes as little-endian `u64`. Bit `i` of token `u` at layer `l`
//!   is bit `i % 64` of the word for `block = i / 64`.
//! * segment draw: same key as the score word, input `0x02 ‖ k:u32le`.

use crate::types::{full_mask, words_for, Token, Vocabulary, WatermarkKey};

const SCORE_DOMAIN: [u8; 16] = *b"binomark/scores1";
const TAG_CONTEXT: u8 = 0x00;
const TAG_SCORE: u8 = 0x01;
const TAG_SEGMENT: u8 = 0x02;

/// 128-bit seed derived from the key and the preceding context window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ContextSeed(pub u128);

impl ContextSeed {
    fn score_key(&self) -> [u8; 32] {
        let mut key = [0u8; 32];
        key[..16].copy_from_slice(&self.0.to_le_bytes());
        key[16..].copy_from_slice(&SCORE_DOMAIN);
        key
    }
}

/// Hashes the last `key.context_window()` tokens of `context`.
///
/// `context` may be shorter than the window at the start of a sequence; the
/// missing oldest positions are filled with `vocab.sentinel()`.
pub fn derive_seed(key: &WatermarkKey, vocab: Vocabulary, context: &[Token]) -> ContextSeed {
    let k = key.context_window();
    let tail = &context[context.len().saturating_sub(k)..];
    let mut input = Vec::with_capacity(5 + 4 * k);
    input.push(TAG_CONTEXT);
    input.extend_from_slice(&(k as u32).to_le_bytes());
    for _ in tail.len()..k {
        input.extend_from_slice(&vocab.sentinel().to_le_bytes());
    }
    for &t in tail {
        input.extend_from_slice(&t.to_le_bytes());
    }
    let hash = blake3::keyed_hash(key.bytes(), &input);
    let mut seed = [0u8; 16];
    seed.copy_from_slice(&hash.as_bytes()[..16]);
    ContextSeed(u128::from_le_bytes(seed))
}

/// Seed for position `t` of `tokens`, using the preceding window only.
pub fn seed_at(key: &WatermarkKey, vocab: Vocabulary, tokens: &[Token], t: usize) -> ContextSeed {
    let k = key.context_window();
    derive_seed(key, vocab, &tokens[t.saturating_sub(k)..t])
}

/// Hashes 64 score bits for `(token, block, layer)`.
pub fn score_word(seed: ContextSeed, token: Token, block: u32, layer: u32) -> u64 {
    let mut input = [0u8; 13];
    input[0] = TAG_SCORE;
    input[1..5].copy_from_slice(&token.to_le_bytes());
    input[5..9].copy_from_slice(&block.to_le_bytes());
    input[9..13].copy_from_slice(&layer.to_le_bytes());
    let hash = blake3::keyed_hash(&seed.score_key(), &input);
    u64::from_le_bytes(hash.as_bytes()[..8].try_into().unwrap())
}

/// The Bernoulli(1/2) score of token `token` for bit `bit` at layer `layer`.
pub fn bernoulli_score(seed: ContextSeed, token: Token, bit: usize, layer: u32) -> u8 {
    ((score_word(seed, token, (bit / 64) as u32, layer) >> (bit % 64)) & 1) as u8
}

/// Packed `m`-bit score row of one token, bits beyond `m` cleared.
pub fn score_row(seed: ContextSeed, token: Token, m: usize, layer: u32, out: &mut [u64]) {
    debug_assert_eq!(out.len(), words_for(m));
    for (block, word) in out.iter_mut().enumerate() {
        *word = score_word(seed, token, block as u32, layer);
    }
    if !m.is_multiple_of(64) {
        *out.last_mut().unwrap() &= (1u64 << (m % 64)) - 1;
    }
}

/// Pseudorandom uniform draw in `0..k`, deterministic in the seed.
pub fn segment_draw(seed: ContextSeed, k: usize) -> usize {
    let mut input = [0u8; 5];
    input[0] = TAG_SEGMENT;
    input[1..5].copy_from_slice(&(k as u32).to_le_bytes());
    let hash = blake3::keyed_hash(&seed.score_key(), &input);
    let word = u64::from_le_bytes(hash.as_bytes()[..8].try_into().unwrap());
    ((word as u128 * k as u128) >> 64) as usize
}

/// Raw Bernoulli scores for a set of tokens: one packed `m`-bit row per token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScoreBlock {
    m: usize,
    words_per_row: usize,
    tokens: Vec<Token>,
    data: Vec<u64>,
}

impl ScoreBlock {
    /// Scores for an explicit token list (e.g. the support of a truncated
    /// distribution).
    pub fn for_tokens(seed: ContextSeed, tokens: &[Token], m: usize, layer: u32) -> Self {
        let words_per_row = words_for(m);
        let mut data = vec![0u64; words_per_row * tokens.len()];
        for (row, &token) in data.chunks_mut(words_per_row.max(1)).zip(tokens) {
            score_row(seed, token, m, layer, row);
        }
        Self {
            m,
            words_per_row,
            tokens: tokens.to_vec(),
            data,
        }
    }

    /// Builds a block from explicit `0/1` rows (`rows[r][i]`).
    pub fn from_bits(tokens: Vec<Token>, rows: &[Vec<u8>]) -> Self {
        assert_eq!(tokens.len(), rows.len());
        let m = rows.first().map_or(0, Vec::len);
        let words_per_row = words_for(m);
        let mut data = Vec::with_capacity(words_per_row * rows.len());
        for row in rows {
            assert_eq!(row.len(), m, "ragged score rows");
            data.extend(crate::types::pack_bits(row.iter().map(|&b| b != 0), m));
        }
        Self {
            m,
            words_per_row,
            tokens,
            data,
        }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn rows(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn row(&self, r: usize) -> &[u64] {
        &self.data[r * self.words_per_row..(r + 1) * self.words_per_row]
    }

    pub fn bit(&self, r: usize, i: usize) -> u8 {
        ((self.row(r)[i / 64] >> (i % 64)) & 1) as u8
    }

    pub fn mask(&self) -> Vec<u64> {
        full_mask(self.m)
    }
}

/// The full `m × |Σ|` score matrix of one layer.
pub fn score_matrix(seed: ContextSeed, vocab: Vocabulary, m: usize, layer: u32) -> ScoreBlock {
    let tokens: Vec<Token> = (0..vocab.size() as Token).collect();
    ScoreBlock::for_tokens(seed, &tokens, m, layer)
}
