//! Payload extraction and detection.
//!
//! A text is decoded by recomputing the raw score row of every kept position,
//! counting per bit how many positions vote for 1, and rounding the mean.
//! Confidence comes from two tests against the fair-coin null: an exact
//! two-sided binomial test per bit, and a Monte-Carlo calibrated
//! log-likelihood-ratio statistic that aggregates all bits into one
//! zero-bit decision.

use std::collections::{HashMap, HashSet};
use std::sync::{Arc, RwLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::encoder::{allocate_segment, segment_mask, AllocationConfig};
use crate::error::{Error, Result};
use crate::prf::{score_row, seed_at};
use crate::schemes::synthid_weights;
use crate::stats::{normal_cdf, sample_binomial_half};
use crate::types::{
    context_window, full_mask, words_for, Message, Token, Vocabulary, WatermarkKey,
};

pub use crate::stats::binom_two_sided_pvalue;

pub const DEFAULT_MC_SAMPLES: usize = 20_000;
pub const MIN_MC_SAMPLES: usize = 1000;
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Positions whose `(context window, token)` pair is seen for the first time.
pub fn dedup_positions(tokens: &[Token], k: usize, sentinel: Token) -> Vec<usize> {
    let mut seen = HashSet::with_capacity(tokens.len());
    let mut window = Vec::with_capacity(k + 1);
    let mut kept = Vec::new();
    for (t, &u) in tokens.iter().enumerate() {
        context_window(tokens, t, k, sentinel, &mut window);
        window.push(u);
        if seen.insert(window.clone()) {
            kept.push(t);
        }
    }
    kept
}

/// Per-bit vote counts of one text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteTable {
    /// Votes for 1, per bit.
    pub counts: Vec<u64>,
    /// Positions that voted on each bit. Equal to `n_eff` unless position
    /// allocation restricts each position to one segment.
    pub trials: Vec<u64>,
    pub n_eff: usize,
}

impl VoteTable {
    pub fn m(&self) -> usize {
        self.counts.len()
    }

    /// Table with every bit voted on by all `n_eff` positions.
    pub fn uniform(counts: Vec<u64>, n_eff: usize) -> Self {
        let trials = vec![n_eff as u64; counts.len()];
        Self {
            counts,
            trials,
            n_eff,
        }
    }

    /// Two-sided exact binomial p-value of every bit.
    pub fn pvalues(&self) -> Vec<f64> {
        self.counts
            .iter()
            .zip(&self.trials)
            .map(|(&s, &n)| {
                if n == 0 {
                    1.0
                } else {
                    binom_two_sided_pvalue(s, n)
                }
            })
            .collect()
    }
}

/// Decoder settings that must match the ones used at generation time.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub m: usize,
    pub vocab: Vocabulary,
    pub allocation: AllocationConfig,
    /// `Some(n)` switches to the weighted-mean detector over `n` layers.
    pub synthid_layers: Option<u32>,
    pub dedup: bool,
    pub tie_seed: u64,
    pub mc_samples: usize,
    pub mc_seed: u64,
}

impl DecoderConfig {
    pub fn new(m: usize, vocab: Vocabulary) -> Self {
        Self {
            m,
            vocab,
            allocation: AllocationConfig::disabled(),
            synthid_layers: None,
            dedup: true,
            tie_seed: 0,
            mc_samples: DEFAULT_MC_SAMPLES,
            mc_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::EmptyMessage);
        }
        if self.mc_samples < MIN_MC_SAMPLES {
            return Err(Error::InvalidParameter(format!(
                "mc_samples must be >= {MIN_MC_SAMPLES}, got {}",
                self.mc_samples
            )));
        }
        if self.allocation.enabled {
            AllocationConfig::new(self.m, self.allocation.segments)?;
        }
        if self.synthid_layers == Some(0) {
            return Err(Error::InvalidParameter("n_layers must be >= 1".into()));
        }
        Ok(())
    }

    fn positions(&self, tokens: &[Token], key: &WatermarkKey) -> Vec<usize> {
        if self.dedup {
            dedup_positions(tokens, key.context_window(), self.vocab.sentinel())
        } else {
            (0..tokens.len()).collect()
        }
    }
}

/// Counts votes at `positions` of `tokens`.
pub fn vote_table(
    tokens: &[Token],
    positions: &[usize],
    key: &WatermarkKey,
    cfg: &DecoderConfig,
) -> VoteTable {
    let m = cfg.m;
    let mut counts = vec![0u64; m];
    let mut trials = vec![0u64; m];
    let mut raw = vec![0u64; words_for(m)];
    let full = full_mask(m);
    let segments = if cfg.allocation.enabled {
        cfg.allocation.segments
    } else {
        1
    };
    for &t in positions {
        let seed = seed_at(key, cfg.vocab, tokens, t);
        score_row(seed, tokens[t], m, 0, &mut raw);
        let segment_bits;
        let mask = if segments > 1 {
            segment_bits = segment_mask(m, segments, allocate_segment(seed, &cfg.allocation));
            &segment_bits
        } else {
            &full
        };
        for i in 0..m {
            if (mask[i / 64] >> (i % 64)) & 1 == 1 {
                trials[i] += 1;
                counts[i] += (raw[i / 64] >> (i % 64)) & 1;
            }
        }
    }
    VoteTable {
        counts,
        trials,
        n_eff: positions.len(),
    }
}

/// Majority vote per bit; exact ties (and bits with no votes) are decided by
/// a fair coin from `tie_rng`.
pub fn majority_vote<R: Rng + ?Sized>(table: &VoteTable, tie_rng: &mut R) -> Message {
    let bits = table
        .counts
        .iter()
        .zip(&table.trials)
        .map(|(&s, &n)| match (2 * s).cmp(&n) {
            std::cmp::Ordering::Greater => true,
            std::cmp::Ordering::Less => false,
            std::cmp::Ordering::Equal => tie_rng.gen::<bool>(),
        })
        .collect();
    Message::new(bits).expect("vote table has at least one bit")
}

/// Decodes the payload by majority vote over the deduplicated positions.
pub fn decode_message(
    tokens: &[Token],
    key: &WatermarkKey,
    cfg: &DecoderConfig,
) -> Result<(Message, VoteTable)> {
    if cfg.m == 0 {
        return Err(Error::EmptyMessage);
    }
    let positions = cfg.positions(tokens, key);
    if positions.is_empty() {
        return Err(Error::EmptyAfterDedup);
    }
    let table = vote_table(tokens, &positions, key, cfg);
    let mut tie_rng = ChaCha8Rng::seed_from_u64(cfg.tie_seed);
    let message = majority_vote(&table, &mut tie_rng);
    Ok((message, table))
}

fn xlogx_ratio(s: u64, half: f64) -> f64 {
    if s == 0 {
        0.0
    } else {
        s as f64 * (s as f64 / half).ln()
    }
}

/// Contribution of one bit to the zero-bit statistic.
pub fn lambda_term(s: u64, n: u64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let half = n as f64 / 2.0;
    // Clamp rounding below zero: each term is n times a KL divergence.
    (xlogx_ratio(s, half) + xlogx_ratio(n - s, half)).max(0.0)
}

/// `Λ = Σ_i [S_i ln(S_i/(n/2)) + (n - S_i) ln((n - S_i)/(n/2))]`, `0 ln 0 = 0`.
pub fn zero_bit_statistic(table: &VoteTable) -> f64 {
    table
        .counts
        .iter()
        .zip(&table.trials)
        .map(|(&s, &n)| lambda_term(s, n))
        .sum()
}

/// Sorted draws of `Λ` under the null for a fixed trials vector.
#[derive(Clone, Debug, PartialEq)]
pub struct NullTable {
    sorted: Vec<f64>,
}

impl NullTable {
    pub fn simulate<R: Rng + ?Sized>(trials: &[u64], samples: usize, rng: &mut R) -> Self {
        let terms: Vec<Vec<f64>> = trials
            .iter()
            .map(|&n| (0..=n).map(|s| lambda_term(s, n)).collect())
            .collect();
        let mut sorted: Vec<f64> = (0..samples)
            .map(|_| {
                trials
                    .iter()
                    .zip(&terms)
                    .map(|(&n, t)| t[sample_binomial_half(n, rng) as usize])
                    .sum()
            })
            .collect();
        sorted.sort_by(f64::total_cmp);
        Self { sorted }
    }

    pub fn samples(&self) -> usize {
        self.sorted.len()
    }

    /// `(1 + #{j : Λ_j >= Λ_obs}) / (N + 1)`.
    pub fn pvalue(&self, observed: f64) -> f64 {
        // Draws equal to the observation up to summation-order rounding count
        // as exceedances.
        let threshold = observed - 1e-9 * (1.0 + observed.abs());
        let below = self.sorted.partition_point(|&x| x < threshold);
        let exceed = self.sorted.len() - below;
        (1 + exceed) as f64 / (self.sorted.len() + 1) as f64
    }
}

/// Monte-Carlo p-value of `Λ_obs` for `m` bits with `n` votes each.
pub fn zero_bit_pvalue<R: Rng + ?Sized>(
    observed: f64,
    n: u64,
    m: usize,
    mc_samples: usize,
    mc_rng: &mut R,
) -> f64 {
    NullTable::simulate(&vec![n; m], mc_samples, mc_rng).pvalue(observed)
}

/// Result of decoding one text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub schema_version: u32,
    pub decoded: Message,
    pub per_bit_pvalues: Vec<f64>,
    pub per_bit_counts: Vec<u64>,
    pub per_bit_trials: Vec<u64>,
    pub effective_length: usize,
    pub zero_bit_statistic: f64,
    pub zero_bit_pvalue: f64,
    /// Per-bit weighted mean scores; only set by the layered detector.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weighted_means: Option<Vec<f64>>,
}

impl DetectionReport {
    pub fn is_detected(&self, alpha: f64) -> bool {
        self.zero_bit_pvalue < alpha
    }
}

/// Decoder with a shared cache of null tables.
///
/// Null draws for a trials vector are seeded from `mc_seed` and the vector
/// itself, so a cached table equals a freshly simulated one.
#[derive(Debug)]
pub struct Detector {
    key: WatermarkKey,
    cfg: DecoderConfig,
    cache: RwLock<HashMap<Vec<u64>, Arc<NullTable>>>,
}

impl Detector {
    pub fn new(key: WatermarkKey, cfg: DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            key,
            cfg,
            cache: RwLock::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn null_table(&self, trials: &[u64]) -> Arc<NullTable> {
        if let Some(table) = self.cache.read().unwrap().get(trials) {
            return table.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(null_seed(self.cfg.mc_seed, trials));
        let table = Arc::new(NullTable::simulate(trials, self.cfg.mc_samples, &mut rng));
        self.cache
            .write()
            .unwrap()
            .entry(trials.to_vec())
            .or_insert(table)
            .clone()
    }

    pub fn detect(&self, tokens: &[Token]) -> Result<DetectionReport> {
        for (position, &token) in tokens.iter().enumerate() {
            if token as usize >= self.cfg.vocab.size() {
                return Err(Error::TokenOutOfRange {
                    token,
                    position,
                    vocab: self.cfg.vocab.size(),
                });
            }
        }
        match self.cfg.synthid_layers {
            None => self.detect_binomial(tokens),
            Some(layers) => self.detect_layered(tokens, layers),
        }
    }

    fn detect_binomial(&self, tokens: &[Token]) -> Result<DetectionReport> {
        let (decoded, table) = decode_message(tokens, &self.key, &self.cfg)?;
        let statistic = zero_bit_statistic(&table);
        let pvalue = self.null_table(&table.trials).pvalue(statistic);
        Ok(DetectionReport {
            schema_version: REPORT_SCHEMA_VERSION,
            decoded,
            per_bit_pvalues: table.pvalues(),
            per_bit_counts: table.counts,
            per_bit_trials: table.trials,
            effective_length: table.n_eff,
            zero_bit_statistic: statistic,
            zero_bit_pvalue: pvalue,
            weighted_means: None,
        })
    }

    fn detect_layered(&self, tokens: &[Token], layers: u32) -> Result<DetectionReport> {
        let m = self.cfg.m;
        let positions = self.cfg.positions(tokens, &self.key);
        if positions.is_empty() {
            return Err(Error::EmptyAfterDedup);
        }
        let scores = layered_scores(tokens, &positions, &self.key, &self.cfg, layers);
        let n = positions.len() as f64;
        let means: Vec<f64> = scores.iter().map(|s| s / n).collect();
        let table = vote_table(tokens, &positions, &self.key, &self.cfg);
        let mut tie_rng = ChaCha8Rng::seed_from_u64(self.cfg.tie_seed);
        let bits = means
            .iter()
            .map(|&x| {
                if x == 0.5 {
                    tie_rng.gen::<bool>()
                } else {
                    x > 0.5
                }
            })
            .collect();
        let z = layered_z_scores(&means, positions.len(), layers);
        let per_bit_pvalues = z
            .iter()
            .map(|&z| (2.0 * normal_cdf(-z.abs())).min(1.0))
            .collect();
        let statistic = 0.5 * z.iter().map(|z| z * z).sum::<f64>();
        let chi2 = ChiSquared::new(m as f64).expect("m >= 1");
        let pvalue = chi2.sf(2.0 * statistic).max(f64::MIN_POSITIVE);
        Ok(DetectionReport {
            schema_version: REPORT_SCHEMA_VERSION,
            decoded: Message::new(bits)?,
            per_bit_pvalues,
            per_bit_counts: table.counts,
            per_bit_trials: table.trials,
            effective_length: positions.len(),
            zero_bit_statistic: statistic,
            zero_bit_pvalue: pvalue,
            weighted_means: Some(means),
        })
    }
}

fn null_seed(mc_seed: u64, trials: &[u64]) -> u64 {
    let mut hasher = blake3::Hasher::new();
    hasher.update(&mc_seed.to_le_bytes());
    for n in trials {
        hasher.update(&n.to_le_bytes());
    }
    u64::from_le_bytes(hasher.finalize().as_bytes()[..8].try_into().unwrap())
}

/// Per-bit sums over positions of the layer-weighted mean raw score.
pub fn layered_scores(
    tokens: &[Token],
    positions: &[usize],
    key: &WatermarkKey,
    cfg: &DecoderConfig,
    layers: u32,
) -> Vec<f64> {
    let m = cfg.m;
    let weights = synthid_weights(layers);
    let mut raw = vec![0u64; words_for(m)];
    let mut sums = vec![0.0; m];
    for &t in positions {
        let seed = seed_at(key, cfg.vocab, tokens, t);
        for (layer, w) in weights.iter().enumerate() {
            score_row(seed, tokens[t], m, layer as u32, &mut raw);
            let w = w / layers as f64;
            for (i, s) in sums.iter_mut().enumerate() {
                if (raw[i / 64] >> (i % 64)) & 1 == 1 {
                    *s += w;
                }
            }
        }
    }
    sums
}

/// Normal z-scores of per-bit weighted means over `n` positions. Under the
/// null each position contributes mean 1/2 and variance `Σ w_k² / (4 L²)`.
pub fn layered_z_scores(means: &[f64], n: usize, layers: u32) -> Vec<f64> {
    let weights = synthid_weights(layers);
    let l = layers as f64;
    let var_token = weights.iter().map(|w| w * w).sum::<f64>() / (4.0 * l * l);
    let sd = (var_token / n as f64).sqrt();
    means.iter().map(|&x| (x - 0.5) / sd).collect()
}
