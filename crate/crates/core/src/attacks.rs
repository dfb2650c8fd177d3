//! Token-level edits applied to generated text before decoding.
//!
//! Positions are picked by shuffling all indices with the attack seed and
//! taking a prefix, so for a fixed seed the edit sets are nested across
//! fractions.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{AttackAnnotation, GenerationRecord};
use crate::types::{Token, Vocabulary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Delete,
    Substitute,
}

impl AttackKind {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Delete => "delete",
            Self::Substitute => "substitute",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

impl AttackConfig {
    pub fn new(kind: AttackKind, fraction: f64, seed: u64) -> Result<Self> {
        check_fraction(fraction)?;
        Ok(Self {
            kind,
            fraction,
            seed,
        })
    }

    pub fn apply(&self, tokens: &[Token], vocab: Vocabulary) -> Result<Vec<Token>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        match self.kind {
            AttackKind::Delete => delete_tokens(tokens, self.fraction, &mut rng),
            AttackKind::Substitute => substitute_tokens(tokens, self.fraction, vocab, &mut rng),
        }
    }

    /// Attacks the completion of `record` and annotates the result.
    pub fn apply_to_record(&self, record: &GenerationRecord) -> Result<GenerationRecord> {
        let completion = self.apply(&record.completion, record.vocab()?)?;
        let mut out = record.clone();
        out.attack = Some(AttackAnnotation {
            kind: self.kind.label().into(),
            fraction: self.fraction,
            seed: self.seed,
            original_length: record.completion.len(),
        });
        out.completion = completion;
        Ok(out)
    }
}

fn check_fraction(fraction: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidParameter(format!(
            "attack fraction must be in [0, 1], got {fraction}"
        )));
    }
    Ok(())
}

fn edit_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).floor() as usize).min(n)
}

fn shuffled_positions<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Removes `⌊fraction · n⌋` uniformly chosen positions, keeping order.
pub fn delete_tokens<R: Rng + ?Sized>(
    tokens: &[Token],
    fraction: f64,
    rng: &mut R,
) -> Result<Vec<Token>> {
    check_fraction(fraction)?;
    let order = shuffled_positions(tokens.len(), rng);
    let mut removed = vec![false; tokens.len()];
    for &i in &order[..edit_count(tokens.len(), fraction)] {
        removed[i] = true;
    }
    Ok(tokens
        .iter()
        .zip(&removed)
        .filter(|(_, &r)| !r)
        .map(|(&t, _)| t)
        .collect())
}

/// Replaces `⌊fraction · n⌋` uniformly chosen positions with a uniformly
/// chosen different token.
pub fn substitute_tokens<R: Rng + ?Sized>(
    tokens: &[Token],
    fraction: f64,
    vocab: Vocabulary,
    rng: &mut R,
) -> Result<Vec<Token>> {
    check_fraction(fraction)?;
    let order = shuffled_positions(tokens.len(), rng);
    let mut out = tokens.to_vec();
    for &i in &order[..edit_count(tokens.len(), fraction)] {
        let mut replacement = rng.gen_range(0..vocab.size() as Token - 1);
        if replacement >= tokens[i] {
            replacement += 1;
        }
        out[i] = replacement;
    }
    Ok(out)
}
