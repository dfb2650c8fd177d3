//! Watermark transforms `q(scores, p)`.
//!
//! Each transform has a dense form over a full [`Distribution`] and a sparse
//! form over `(support, probabilities)` slices used by the generation loop,
//! where only tokens that survived top-k truncation are candidates.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{complement_row, StepScorer};
use crate::error::{Error, Result};
use crate::prf::{score_row, ContextSeed};
use crate::types::{words_for, Distribution, Message, Token};

pub const DEFAULT_SOLVER_SAMPLES: usize = 128;
pub const DEFAULT_SOLVER_ITERATIONS: usize = 60;
pub const LAMBDA_UPPER: f64 = 100.0;
pub const DEFAULT_SYNTHID_LAYERS: u32 = 100;

/// Scheme and its strength parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case", deny_unknown_fields)]
pub enum SchemeConfig {
    /// No watermark: sample from the shaped LM distribution.
    Unwatermarked,
    RedGreen {
        delta: f64,
    },
    SoftPpl {
        epsilon: f64,
        #[serde(default = "default_samples")]
        mc_samples: usize,
        #[serde(default = "default_iterations")]
        iterations: usize,
    },
    SoftPplUnconstrained {
        lambda: f64,
    },
    Synthid {
        #[serde(default = "default_layers")]
        n_layers: u32,
        /// Permits the stateful encoder, which is otherwise rejected.
        #[serde(default)]
        allow_stateful: bool,
    },
}

fn default_samples() -> usize {
    DEFAULT_SOLVER_SAMPLES
}

fn default_iterations() -> usize {
    DEFAULT_SOLVER_ITERATIONS
}

fn default_layers() -> u32 {
    DEFAULT_SYNTHID_LAYERS
}

impl SchemeConfig {
    pub fn soft_ppl(epsilon: f64) -> Self {
        Self::SoftPpl {
            epsilon,
            mc_samples: DEFAULT_SOLVER_SAMPLES,
            iterations: DEFAULT_SOLVER_ITERATIONS,
        }
    }

    pub fn synthid(n_layers: u32) -> Self {
        Self::Synthid {
            n_layers,
            allow_stateful: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        match *self {
            Self::RedGreen { delta } if !(delta >= 0.0 && delta.is_finite()) => {
                bad(format!("delta must be >= 0, got {delta}"))
            }
            Self::SoftPpl { epsilon, .. } if !(epsilon >= 0.0 && epsilon.is_finite()) => {
                bad(format!("epsilon must be >= 0, got {epsilon}"))
            }
            Self::SoftPpl {
                mc_samples,
                iterations,
                ..
            } if mc_samples == 0 || iterations == 0 => {
                bad("solver needs at least one sample and one iteration".into())
            }
            Self::SoftPplUnconstrained { lambda } if !(lambda > 0.0 && lambda.is_finite()) => {
                bad(format!("lambda must be > 0, got {lambda}"))
            }
            Self::Synthid { n_layers: 0, .. } => bad("n_layers must be >= 1".into()),
            _ => Ok(()),
        }
    }

    pub fn is_watermarked(&self) -> bool {
        !matches!(self, Self::Unwatermarked)
    }

    /// Number of score layers the decoder must read.
    pub fn layers(&self) -> u32 {
        match self {
            Self::Synthid { n_layers, .. } => *n_layers,
            _ => 1,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::Unwatermarked => "none".into(),
            Self::RedGreen { delta } => format!("red_green(delta={delta})"),
            Self::SoftPpl { epsilon, .. } => format!("soft_ppl(eps={epsilon})"),
            Self::SoftPplUnconstrained { lambda } => format!("soft_ppl_unc(lambda={lambda})"),
            Self::Synthid { n_layers, .. } => format!("synthid(layers={n_layers})"),
        }
    }
}

/// Exponential tilt weights `p(u) exp(delta * s(u))`, normalized in place.
pub fn red_green_weights(probs: &[f64], scores: &[f64], delta: f64) -> Vec<f64> {
    assert_eq!(probs.len(), scores.len());
    let top = scores
        .iter()
        .zip(probs)
        .filter(|(_, &p)| p > 0.0)
        .map(|(&s, _)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut q: Vec<f64> = probs
        .iter()
        .zip(scores)
        .map(|(&p, &s)| {
            if p > 0.0 {
                p * (delta * (s - top)).exp()
            } else {
                0.0
            }
        })
        .collect();
    let total: f64 = q.iter().sum();
    q.iter_mut().for_each(|x| *x /= total);
    q
}

pub fn red_green_transform(p: &Distribution, scores: &[f64], delta: f64) -> Result<Distribution> {
    check_len(p.len(), scores.len())?;
    Distribution::from_weights(red_green_weights(p.probs(), scores, delta))
}

fn check_len(left: usize, right: usize) -> Result<()> {
    if left != right {
        return Err(Error::LengthMismatch { left, right });
    }
    Ok(())
}

/// Index maximizing `scores[i] + lambda * log_probs[i]`; exact ties are broken
/// uniformly with `tie_rng`. Entries with `log_probs = -inf` are excluded.
pub fn soft_ppl_argmax<R: Rng + ?Sized>(
    log_probs: &[f64],
    scores: &[f64],
    lambda: f64,
    tie_rng: &mut R,
) -> usize {
    let mut best = f64::NEG_INFINITY;
    let mut best_index = usize::MAX;
    let mut tied = 0u32;
    for (i, (&lp, &s)) in log_probs.iter().zip(scores).enumerate() {
        if lp == f64::NEG_INFINITY {
            continue;
        }
        let value = s + lambda * lp;
        if value > best || best_index == usize::MAX {
            best = value;
            best_index = i;
            tied = 1;
        } else if value == best {
            tied += 1;
            if tie_rng.gen_range(0..tied) == 0 {
                best_index = i;
            }
        }
    }
    assert!(best_index != usize::MAX, "distribution has no support");
    best_index
}

/// The token picked by the Soft-PPL transform (a one-hot distribution).
pub fn soft_ppl_transform<R: Rng + ?Sized>(
    p: &Distribution,
    scores: &[f64],
    lambda: f64,
    tie_rng: &mut R,
) -> Result<Token> {
    check_len(p.len(), scores.len())?;
    let log_probs: Vec<f64> = p.probs().iter().map(|&x| x.ln()).collect();
    Ok(soft_ppl_argmax(&log_probs, scores, lambda, tie_rng) as Token)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Solved,
    /// Single-token support; the constraint is vacuous.
    Degenerate,
    /// Even `lambda -> 0` distorts less than requested.
    Infeasible,
    /// Even `lambda = 100` distorts more than allowed.
    Saturated,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LambdaSolution {
    pub lambda: f64,
    pub status: SolveStatus,
    /// Monte-Carlo estimate of `E[log p(token)]` at `lambda`.
    pub achieved: f64,
    /// `p · log p - epsilon`.
    pub target: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverConfig {
    pub mc_samples: usize,
    pub iterations: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            mc_samples: DEFAULT_SOLVER_SAMPLES,
            iterations: DEFAULT_SOLVER_ITERATIONS,
        }
    }
}

/// A frozen batch of score draws: `samples × support` scores plus tie
/// priorities, reused for every bisection iterate (common random numbers).
#[derive(Clone, Debug)]
pub struct ScoreDraws {
    support: usize,
    scores: Vec<f64>,
    priority: Vec<u32>,
}

impl ScoreDraws {
    /// Draws fresh uniformly random complemented rows for each support token.
    pub fn sample<R: Rng + ?Sized>(
        scorer: &StepScorer,
        support: usize,
        samples: usize,
        rng: &mut R,
    ) -> Self {
        let words = scorer.mask().len();
        let mut row = vec![0u64; words];
        let mut scores = Vec::with_capacity(samples * support);
        let mut priority = Vec::with_capacity(samples * support);
        for _ in 0..samples * support {
            for (w, k) in row.iter_mut().zip(scorer.mask()) {
                *w = rng.next_u64() & k;
            }
            scores.push(scorer.score(&row));
            priority.push(rng.next_u32());
        }
        Self {
            support,
            scores,
            priority,
        }
    }

    pub fn samples(&self) -> usize {
        self.scores.len() / self.support.max(1)
    }

    /// Mean of `log p` at the per-sample argmax of `score + lambda * log p`.
    pub fn expected_log_prob(&self, log_probs: &[f64], lambda: f64) -> f64 {
        assert_eq!(log_probs.len(), self.support);
        let mut total = 0.0;
        for (scores, priority) in self
            .scores
            .chunks_exact(self.support)
            .zip(self.priority.chunks_exact(self.support))
        {
            let mut best = 0;
            let mut best_value = scores[0] + lambda * log_probs[0];
            for u in 1..self.support {
                let value = scores[u] + lambda * log_probs[u];
                if value > best_value || (value == best_value && priority[u] > priority[best]) {
                    best = u;
                    best_value = value;
                }
            }
            total += log_probs[best];
        }
        total / self.samples() as f64
    }
}

/// Finds `lambda` in `(0, 100)` with `E[log p(argmax)] = p · log p - epsilon`
/// by bisection over a fixed batch of score draws.
///
/// `probs` is the distribution restricted to its support (all entries > 0).
pub fn solve_lambda<R: Rng + ?Sized>(
    probs: &[f64],
    scorer: &StepScorer,
    epsilon: f64,
    cfg: SolverConfig,
    rng: &mut R,
) -> LambdaSolution {
    debug_assert!(probs.iter().all(|&p| p > 0.0));
    let log_probs: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
    let neg_entropy: f64 = probs.iter().zip(&log_probs).map(|(p, lp)| p * lp).sum();
    let target = neg_entropy - epsilon;
    if probs.len() <= 1 {
        return LambdaSolution {
            lambda: LAMBDA_UPPER,
            status: SolveStatus::Degenerate,
            achieved: log_probs.first().copied().unwrap_or(0.0),
            target,
        };
    }
    let draws = ScoreDraws::sample(scorer, probs.len(), cfg.mc_samples, rng);
    solve_lambda_with(&draws, &log_probs, target, cfg.iterations)
}

/// `λ ↦ E[log p(argmax)]` over a batch of draws, tabulated once.
///
/// For each draw the argmax of `s(u) + λ log p(u)` is the upper envelope of
/// a set of lines, so it changes only at finitely many breakpoints. Between
/// breakpoints the profile agrees with [`ScoreDraws::expected_log_prob`];
/// exactly at a breakpoint the steeper line wins instead of the tie priority.
#[derive(Clone, Debug)]
pub struct LambdaProfile {
    start: f64,
    breaks: Vec<f64>,
    cumulative: Vec<f64>,
    samples: usize,
}

impl LambdaProfile {
    /// Tabulates breakpoints in `(0, LAMBDA_UPPER]`.
    pub fn new(draws: &ScoreDraws, log_probs: &[f64]) -> Self {
        assert_eq!(log_probs.len(), draws.support);
        let mut start = 0.0;
        let mut events: Vec<(f64, f64)> = Vec::new();
        for (scores, priority) in draws
            .scores
            .chunks_exact(draws.support)
            .zip(draws.priority.chunks_exact(draws.support))
        {
            // Argmax just above zero: score, then log p, then priority.
            let mut cur = 0;
            for u in 1..draws.support {
                let key = (scores[u], log_probs[u], priority[u]);
                let best = (scores[cur], log_probs[cur], priority[cur]);
                if key.0 > best.0
                    || (key.0 == best.0 && (key.1 > best.1 || (key.1 == best.1 && key.2 > best.2)))
                {
                    cur = u;
                }
            }
            start += log_probs[cur];
            loop {
                let mut next: Option<(usize, f64)> = None;
                for v in 0..draws.support {
                    if log_probs[v] <= log_probs[cur] {
                        continue;
                    }
                    let cross = (scores[cur] - scores[v]) / (log_probs[v] - log_probs[cur]);
                    let better = match next {
                        None => true,
                        Some((w, c)) => cross < c || (cross == c && log_probs[v] > log_probs[w]),
                    };
                    if better {
                        next = Some((v, cross));
                    }
                }
                match next {
                    Some((v, cross)) if cross <= LAMBDA_UPPER => {
                        events.push((cross.max(0.0), log_probs[v] - log_probs[cur]));
                        cur = v;
                    }
                    _ => break,
                }
            }
        }
        events.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut running = start;
        let cumulative = events
            .iter()
            .map(|&(_, delta)| {
                running += delta;
                running
            })
            .collect();
        Self {
            start,
            breaks: events.into_iter().map(|(b, _)| b).collect(),
            cumulative,
            samples: draws.samples(),
        }
    }

    /// `E[log p(argmax)]` at `lambda > 0`.
    pub fn eval(&self, lambda: f64) -> f64 {
        let k = self.breaks.partition_point(|&b| b <= lambda);
        let total = if k == 0 {
            self.start
        } else {
            self.cumulative[k - 1]
        };
        total / self.samples as f64
    }

    /// `E[log p(argmax)]` in the limit `lambda -> 0+`.
    pub fn at_zero(&self) -> f64 {
        self.start / self.samples as f64
    }

    /// Midpoint of the constant piece containing `lambda`.
    pub fn interior(&self, lambda: f64) -> f64 {
        let k = self.breaks.partition_point(|&b| b <= lambda);
        let lower = if k == 0 { 0.0 } else { self.breaks[k - 1] };
        let upper = self.breaks.get(k).copied().unwrap_or(LAMBDA_UPPER);
        if upper <= lower {
            lambda
        } else {
            0.5 * (lower + upper)
        }
    }
}

/// Bisection against an existing batch of draws.
pub fn solve_lambda_with(
    draws: &ScoreDraws,
    log_probs: &[f64],
    target: f64,
    iterations: usize,
) -> LambdaSolution {
    let at_upper = draws.expected_log_prob(log_probs, LAMBDA_UPPER);
    if at_upper < target {
        return LambdaSolution {
            lambda: LAMBDA_UPPER,
            status: SolveStatus::Saturated,
            achieved: at_upper,
            target,
        };
    }
    let profile = LambdaProfile::new(draws, log_probs);
    let (mut lo, mut hi) = (0.0, LAMBDA_UPPER);
    for _ in 0..iterations {
        let mid = 0.5 * (lo + hi);
        if profile.eval(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // midpoint of the constant piece, away from shared breakpoints
    let lambda = profile.interior(hi);
    LambdaSolution {
        lambda,
        status: if profile.at_zero() >= target {
            SolveStatus::Infeasible
        } else {
            SolveStatus::Solved
        },
        achieved: profile.eval(lambda),
        target,
    }
}

/// One distortion-free tournament layer:
/// `q(u) = p(u) [1 + σ (G̃(u) - Σ_v p(v) G̃(v))]`, `σ = 1 / (max G̃ - min G̃)`.
pub fn synthid_layer_weights(probs: &[f64], scores: &[f64]) -> Vec<f64> {
    assert_eq!(probs.len(), scores.len());
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    if max == min {
        return probs.to_vec();
    }
    let sigma = 1.0 / (max - min);
    let mean: f64 = probs.iter().zip(scores).map(|(p, s)| p * s).sum();
    probs
        .iter()
        .zip(scores)
        .map(|(&p, &s)| p * (1.0 + sigma * (s - mean)))
        .collect()
}

pub fn synthid_layer(p: &Distribution, scores: &[f64]) -> Result<Distribution> {
    check_len(p.len(), scores.len())?;
    let q = synthid_layer_weights(p.probs(), scores);
    // Entries are non-negative up to rounding; clamp tiny negatives.
    Distribution::from_weights(q.into_iter().map(|x| x.max(0.0)).collect())
}

/// Applies `n_layers` tournament layers over `tokens`, layer `l` drawing its
/// raw scores from the PRF with layer index `l`.
///
/// `scorer_for_layer` turns each layer's complemented rows into scores.
pub fn synthid_layers_sparse(
    probs: &[f64],
    tokens: &[Token],
    seed: ContextSeed,
    message: &Message,
    n_layers: u32,
    scorer: &StepScorer,
) -> Vec<f64> {
    let m = message.len();
    let message_words = message.words();
    let mut raw = vec![0u64; words_for(m)];
    let mut comp = vec![0u64; words_for(m)];
    let mut q = probs.to_vec();
    let mut scores = vec![0.0; tokens.len()];
    for layer in 0..n_layers {
        for (s, &u) in scores.iter_mut().zip(tokens) {
            score_row(seed, u, m, layer, &mut raw);
            complement_row(&raw, &message_words, scorer.mask(), &mut comp);
            *s = scorer.score(&comp);
        }
        q = synthid_layer_weights(&q, &scores);
        q.iter_mut().for_each(|x| *x = x.max(0.0));
    }
    let total: f64 = q.iter().sum();
    q.iter_mut().for_each(|x| *x /= total);
    q
}

/// Multibit tournament over the whole vocabulary of `p`.
pub fn synthid_multibit_transform(
    p: &Distribution,
    seed: ContextSeed,
    message: &Message,
    n_layers: u32,
) -> Result<Distribution> {
    if n_layers == 0 {
        return Err(Error::InvalidParameter("n_layers must be >= 1".into()));
    }
    let tokens: Vec<Token> = (0..p.len() as Token).collect();
    let q = synthid_layers_sparse(
        p.probs(),
        &tokens,
        seed,
        message,
        n_layers,
        &StepScorer::stateless(message.len()),
    );
    Distribution::from_weights(q)
}

/// Layer weights decaying linearly from 10 to 1, scaled to sum to `n_layers`.
pub fn synthid_weights(n_layers: u32) -> Vec<f64> {
    assert!(n_layers >= 1);
    let n = n_layers as usize;
    let raw: Vec<f64> = if n == 1 {
        vec![1.0]
    } else {
        (0..n)
            .map(|k| 10.0 - 9.0 * k as f64 / (n - 1) as f64)
            .collect()
    };
    let total: f64 = raw.iter().sum();
    raw.iter().map(|w| w * n as f64 / total).collect()
}

/// Weighted mean over layers of one token's raw scores, per bit.
///
/// `layer_scores[k][i]` is the raw score of bit `i` at layer `k`.
pub fn synthid_weighted_decode(layer_scores: &[Vec<u8>], weights: &[f64]) -> Vec<f64> {
    assert_eq!(layer_scores.len(), weights.len());
    let n = layer_scores.len() as f64;
    let m = layer_scores.first().map_or(0, Vec::len);
    (0..m)
        .map(|i| {
            layer_scores
                .iter()
                .zip(weights)
                .map(|(row, w)| w * row[i] as f64)
                .sum::<f64>()
                / n
        })
        .collect()
}
