//! Turns raw Bernoulli scores and the payload into per-token watermark scores.
//!
//! * stateless: the binomial score, the number of complemented bits that agree
//!   with the message;
//! * stateful: each bit contributes the normal-approximation probability that
//!   it ends up decoded correctly, averaged over a set of horizons;
//! * allocation: the stateless score restricted to one pseudorandomly chosen
//!   segment of the message.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prf::{segment_draw, ContextSeed, ScoreBlock};
use crate::stats::normal_cdf;
use crate::types::{full_mask, Message};

/// Horizons averaged by the stateful encoder.
pub const DEFAULT_HORIZONS: [u32; 5] = [200, 300, 500, 1000, 2000];

/// `g` if the message bit is 1, otherwise `1 - g` (XNOR).
pub fn complement_score(g: u8, bit: bool) -> u8 {
    debug_assert!(g <= 1);
    if bit {
        g
    } else {
        1 - g
    }
}

/// Number of bits of `g` that agree with the message.
pub fn binomial_score(g: &[u8], message: &Message) -> Result<u32> {
    if g.len() != message.len() {
        return Err(Error::LengthMismatch {
            left: g.len(),
            right: message.len(),
        });
    }
    Ok(g.iter()
        .zip(message.bits())
        .map(|(&gi, &mi)| complement_score(gi, mi) as u32)
        .sum())
}

/// Packed XNOR of a raw score row with the message, restricted to `mask`.
pub fn complement_row(raw: &[u64], message_words: &[u64], mask: &[u64], out: &mut [u64]) {
    for (((o, r), m), k) in out.iter_mut().zip(raw).zip(message_words).zip(mask) {
        *o = !(r ^ m) & k;
    }
}

/// Binomial score of every row of `block`.
pub fn stateless_scores(block: &ScoreBlock, message: &Message) -> Vec<f64> {
    assert_eq!(
        block.m(),
        message.len(),
        "score block and message disagree on m"
    );
    let scorer = StepScorer::stateless(message.len());
    scorer.score_block(block, &message.words())
}

/// Running per-bit decode statistics of a sequence being generated.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderState {
    d: Vec<i64>,
    t: u64,
    horizons: Vec<u32>,
}

impl EncoderState {
    pub fn new(m: usize) -> Self {
        Self {
            d: vec![0; m],
            t: 0,
            horizons: DEFAULT_HORIZONS.to_vec(),
        }
    }

    pub fn with_horizons(m: usize, horizons: Vec<u32>) -> Result<Self> {
        if horizons.is_empty() || horizons.contains(&0) {
            return Err(Error::InvalidParameter(
                "horizon set must be non-empty and positive".into(),
            ));
        }
        Ok(Self {
            d: vec![0; m],
            t: 0,
            horizons,
        })
    }

    pub fn d(&self) -> &[i64] {
        &self.d
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn horizons(&self) -> &[u32] {
        &self.horizons
    }

    /// Records the complemented scores (`0/1` per bit) of the realized token.
    pub fn update(&mut self, complemented: &[u8]) {
        assert_eq!(complemented.len(), self.d.len());
        for (d, &g) in self.d.iter_mut().zip(complemented) {
            *d += 2 * g as i64 - 1;
        }
        self.t += 1;
    }

    /// Same as [`update`](Self::update) with packed bits.
    pub fn update_packed(&mut self, complemented: &[u64]) {
        for (i, d) in self.d.iter_mut().enumerate() {
            let g = (complemented[i / 64] >> (i % 64)) & 1;
            *d += 2 * g as i64 - 1;
        }
        self.t += 1;
    }

    fn recovery(&self, x: f64) -> f64 {
        self.horizons
            .iter()
            .map(|&h| normal_cdf(x / (h as f64).sqrt()))
            .sum::<f64>()
            / self.horizons.len() as f64
    }

    /// Per-bit contributions for a matching and a mismatching token.
    pub fn weights(&self) -> StatefulWeights {
        let mut base = 0.0;
        let mut gain = Vec::with_capacity(self.d.len());
        for &d in &self.d {
            let hit = self.recovery(d as f64 + 1.0);
            let miss = self.recovery(d as f64 - 1.0);
            base += miss;
            gain.push(hit - miss);
        }
        StatefulWeights { base, gain }
    }
}

/// Affine form of the stateful score: `base + Σ_i g̃_i · gain_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct StatefulWeights {
    pub base: f64,
    pub gain: Vec<f64>,
}

/// Stateful score of every row of `block`, evaluated term by term.
pub fn stateful_scores(state: &EncoderState, block: &ScoreBlock, message: &Message) -> Vec<f64> {
    assert_eq!(block.m(), message.len());
    assert_eq!(state.d.len(), message.len());
    (0..block.rows())
        .map(|r| {
            (0..message.len())
                .map(|i| {
                    let g = complement_score(block.bit(r, i), message.bit(i)) as i64;
                    state.recovery((state.d[i] + 2 * g - 1) as f64)
                })
                .sum()
        })
        .collect()
}

/// Normal approximation of `P[d_T >= 0 | d_t = d]` when the `remaining`
/// future increments are fair ±1 steps.
pub fn reach_probability(d: i64, remaining: u64) -> f64 {
    assert!(remaining >= 1);
    normal_cdf(d as f64 / (remaining as f64).sqrt())
}

/// Position allocation: each step encodes one of `segments` equal slices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocationConfig {
    pub segments: usize,
    pub enabled: bool,
}

impl AllocationConfig {
    pub fn new(m: usize, segments: usize) -> Result<Self> {
        if segments == 0 || segments > m || !m.is_multiple_of(segments) {
            return Err(Error::InvalidParameter(format!(
                "{segments} segments do not evenly divide {m} bits"
            )));
        }
        Ok(Self {
            segments,
            enabled: true,
        })
    }

    pub fn disabled() -> Self {
        Self {
            segments: 1,
            enabled: false,
        }
    }

    fn effective_segments(&self) -> usize {
        if self.enabled {
            self.segments
        } else {
            1
        }
    }
}

/// Segment encoded at the position with this seed.
pub fn allocate_segment(seed: ContextSeed, cfg: &AllocationConfig) -> usize {
    let k = cfg.effective_segments();
    if k == 1 {
        0
    } else {
        segment_draw(seed, k)
    }
}

/// Packed mask of the bits belonging to `segment`.
pub fn segment_mask(m: usize, segments: usize, segment: usize) -> Vec<u64> {
    let width = m / segments;
    let mut mask = vec![0u64; m.div_ceil(64)];
    for i in segment * width..(segment + 1) * width {
        mask[i / 64] |= 1 << (i % 64);
    }
    mask
}

/// Stateless scores restricted to the segment chosen for `seed`.
pub fn allocated_scores(
    seed: ContextSeed,
    block: &ScoreBlock,
    message: &Message,
    cfg: &AllocationConfig,
) -> Vec<f64> {
    let segment = allocate_segment(seed, cfg);
    let scorer = StepScorer::counting(segment_mask(
        message.len(),
        cfg.effective_segments(),
        segment,
    ));
    scorer.score_block(block, &message.words())
}

/// How per-token scores are derived from raw scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum EncoderMode {
    Stateless,
    Stateful {
        #[serde(default = "default_horizons")]
        horizons: Vec<u32>,
    },
    Allocation {
        segments: usize,
    },
}

fn default_horizons() -> Vec<u32> {
    DEFAULT_HORIZONS.to_vec()
}

impl EncoderMode {
    pub fn stateful() -> Self {
        Self::Stateful {
            horizons: default_horizons(),
        }
    }

    pub fn is_stateful(&self) -> bool {
        matches!(self, Self::Stateful { .. })
    }

    pub fn allocation(&self, m: usize) -> Result<AllocationConfig> {
        match self {
            Self::Allocation { segments } => AllocationConfig::new(m, *segments),
            _ => Ok(AllocationConfig::disabled()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::Stateless => "stateless".into(),
            Self::Stateful { horizons } if horizons.as_slice() == DEFAULT_HORIZONS => {
                "stateful".into()
            }
            Self::Stateful { horizons } => format!(
                "stateful[{}]",
                horizons
                    .iter()
                    .map(u32::to_string)
                    .collect::<Vec<_>>()
                    .join("/")
            ),
            Self::Allocation { segments } => format!("allocation{segments}"),
        }
    }
}

/// Scores packed complemented rows for one generation step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepScorer {
    mask: Vec<u64>,
    weights: Option<StatefulWeights>,
}

impl StepScorer {
    pub fn stateless(m: usize) -> Self {
        Self::counting(full_mask(m))
    }

    pub fn counting(mask: Vec<u64>) -> Self {
        Self {
            mask,
            weights: None,
        }
    }

    pub fn stateful(state: &EncoderState) -> Self {
        Self {
            mask: full_mask(state.d.len()),
            weights: Some(state.weights()),
        }
    }

    pub fn mask(&self) -> &[u64] {
        &self.mask
    }

    /// Number of message bits this scorer looks at.
    pub fn active_bits(&self) -> u32 {
        self.mask.iter().map(|w| w.count_ones()).sum()
    }

    /// Score of a complemented row (bits outside the mask are ignored).
    pub fn score(&self, complemented: &[u64]) -> f64 {
        match &self.weights {
            None => complemented
                .iter()
                .zip(&self.mask)
                .map(|(c, k)| (c & k).count_ones())
                .sum::<u32>() as f64,
            Some(w) => {
                let mut total = w.base;
                for (block, (c, k)) in complemented.iter().zip(&self.mask).enumerate() {
                    let mut bits = c & k;
                    while bits != 0 {
                        let i = bits.trailing_zeros() as usize;
                        total += w.gain[block * 64 + i];
                        bits &= bits - 1;
                    }
                }
                total
            }
        }
    }

    pub fn score_block(&self, block: &ScoreBlock, message_words: &[u64]) -> Vec<f64> {
        let mut buf = vec![0u64; message_words.len()];
        (0..block.rows())
            .map(|r| {
                complement_row(block.row(r), message_words, &self.mask, &mut buf);
                self.score(&buf)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prf::{derive_seed, score_matrix};
    use crate::types::{Vocabulary, WatermarkKey};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn msg(s: &str) -> Message {
        Message::from_bit_str(s).unwrap()
    }

    #[test]
    fn complement_examples() {
        assert_eq!(complement_score(1, true), 1);
        assert_eq!(complement_score(1, false), 0);
        assert_eq!(complement_score(0, false), 1);
        assert_eq!(complement_score(0, true), 0);
    }

    #[test]
    fn binomial_score_examples() {
        let m = msg("010");
        assert_eq!(binomial_score(&[0, 1, 0], &m).unwrap(), 3);
        assert_eq!(binomial_score(&[1, 0, 1], &m).unwrap(), 0);
        assert_eq!(binomial_score(&[1, 1, 0], &m).unwrap(), 2);
        assert!(binomial_score(&[1, 1], &m).is_err());
    }

    #[test]
    fn stateless_single_bit_reduces_to_complemented_row() {
        let block = ScoreBlock::from_bits(vec![0, 1, 2], &[vec![1], vec![0], vec![1]]);
        assert_eq!(stateless_scores(&block, &msg("1")), vec![1.0, 0.0, 1.0]);
        assert_eq!(stateless_scores(&block, &msg("0")), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn stateless_all_ones_block() {
        let rows = vec![vec![1u8; 5]; 4];
        let block = ScoreBlock::from_bits(vec![0, 1, 2, 3], &rows);
        assert_eq!(stateless_scores(&block, &msg("11111")), vec![5.0; 4]);
    }

    #[test]
    fn stateless_mean_is_half_m() {
        let v = Vocabulary::new(1 << 12).unwrap();
        let key = WatermarkKey::new([3; 32], 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = Message::random(32, &mut rng).unwrap();
        let block = score_matrix(derive_seed(&key, v, &[1, 2, 3]), v, 32, 0);
        let scores = stateless_scores(&block, &m);
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / scores.len() as f64;
        assert!((mean - 16.0).abs() < 0.5, "mean {mean}");
        // variance m/4 = 8, 3 sigma of the sample variance ≈ 0.53
        assert!((var - 8.0).abs() < 0.6, "var {var}");
        assert!(scores.iter().all(|&s| (0.0..=32.0).contains(&s)));
    }

    #[test]
    fn update_examples() {
        let mut s = EncoderState::new(3);
        s.update(&[1, 1, 1]);
        assert_eq!((s.d(), s.t()), (&[1i64, 1, 1][..], 1));

        let mut s = EncoderState::new(1);
        for _ in 0..7 {
            s.update(&[1]);
        }
        assert_eq!(s.d(), &[7]);

        let mut s = EncoderState::new(1);
        for g in [1, 0, 1, 0] {
            s.update(&[g]);
        }
        assert_eq!(s.d(), &[0]);
    }

    #[test]
    fn stateful_examples() {
        let state = EncoderState::with_horizons(1, vec![4]).unwrap();
        let block = ScoreBlock::from_bits(vec![0, 1], &[vec![1], vec![0]]);
        let s = stateful_scores(&state, &block, &msg("1"));
        assert!((s[0] - 0.691_462_461_274_013_1).abs() < 1e-12);
        assert!((s[0] + s[1] - 1.0).abs() < 1e-12);

        let mut saturated = EncoderState::new(4);
        saturated.d = vec![1_000_000; 4];
        let block = ScoreBlock::from_bits(vec![0, 1], &[vec![1, 0, 1, 0], vec![0, 0, 0, 0]]);
        for s in stateful_scores(&saturated, &block, &msg("1111")) {
            assert!((s - 4.0).abs() < 1e-9);
        }
    }

    #[test]
    fn reach_probability_examples() {
        assert_eq!(reach_probability(0, 17), 0.5);
        assert!((reach_probability(4, 16) - 0.841_344_746_068_542_9).abs() < 1e-12);
    }

    #[test]
    fn allocation_single_segment_is_plain_encoder() {
        let v = Vocabulary::new(64).unwrap();
        let key = WatermarkKey::new([8; 32], 3).unwrap();
        let cfg = AllocationConfig::new(16, 1).unwrap();
        let m = Message::random(16, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for ctx in 0..20u32 {
            let seed = derive_seed(&key, v, &[ctx, ctx + 1, ctx + 2]);
            assert_eq!(allocate_segment(seed, &cfg), 0);
            let block = score_matrix(seed, v, 16, 0);
            assert_eq!(
                allocated_scores(seed, &block, &m, &cfg),
                stateless_scores(&block, &m)
            );
        }
        assert!(AllocationConfig::new(32, 5).is_err());
    }

    #[test]
    fn allocation_scores_only_count_segment_bits() {
        let v = Vocabulary::new(64).unwrap();
        let key = WatermarkKey::new([8; 32], 3).unwrap();
        let cfg = AllocationConfig::new(16, 4).unwrap();
        let m = Message::random(16, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let seed = derive_seed(&key, v, &[1, 2, 3]);
        let segment = allocate_segment(seed, &cfg);
        assert_eq!(segment, allocate_segment(seed, &cfg));
        let block = score_matrix(seed, v, 16, 0);
        let scores = allocated_scores(seed, &block, &m, &cfg);
        for (u, &s) in scores.iter().enumerate() {
            let expected: u32 = (segment * 4..segment * 4 + 4)
                .map(|i| complement_score(block.bit(u, i), m.bit(i)) as u32)
                .sum();
            assert_eq!(s, expected as f64);
        }
    }

    #[test]
    fn encoder_mode_serde() {
        let json = serde_json::to_string(&EncoderMode::Allocation { segments: 4 }).unwrap();
        assert_eq!(json, r#"{"mode":"allocation","segments":4}"#);
        let m: EncoderMode = serde_json::from_str(r#"{"mode":"stateful"}"#).unwrap();
        assert_eq!(m, EncoderMode::stateful());
    }

    fn random_state(rng: &mut ChaCha8Rng, m: usize) -> EncoderState {
        let mut s = EncoderState::new(m);
        for _ in 0..rng.gen_range(0..60) {
            let g: Vec<u8> = (0..m).map(|_| rng.gen_range(0..2)).collect();
            s.update(&g);
        }
        s
    }

    proptest! {
        #[test]
        fn parity_invariant_holds(seed in any::<u64>(), m in 1usize..70) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_state(&mut rng, m);
            for &d in s.d() {
                prop_assert!(d.unsigned_abs() <= s.t());
                prop_assert_eq!((d - s.t() as i64).rem_euclid(2), 0);
            }
        }

        #[test]
        fn fast_stateful_path_matches_direct_formula(seed in any::<u64>(), m in 1usize..70) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_state(&mut rng, m);
            let message = Message::random(m, &mut rng).unwrap();
            let rows: Vec<Vec<u8>> = (0..6).map(|_| (0..m).map(|_| rng.gen_range(0..2)).collect()).collect();
            let block = ScoreBlock::from_bits((0..6).collect(), &rows);
            let direct = stateful_scores(&s, &block, &message);
            let fast = StepScorer::stateful(&s).score_block(&block, &message.words());
            for (a, b) in direct.iter().zip(&fast) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn stateful_is_monotone_and_sign_symmetric(seed in any::<u64>(), m in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_state(&mut rng, m);
            let message = Message::random(m, &mut rng).unwrap();
            let raw: Vec<u8> = (0..m).map(|_| rng.gen_range(0..2)).collect();
            let flip = rng.gen_range(0..m);
            let mut raised = raw.clone();
            // set the complemented bit `flip` to 1 and compare against 0
            raised[flip] = message.bit(flip) as u8;
            let mut lowered = raw.clone();
            lowered[flip] = 1 - message.bit(flip) as u8;
            let block = ScoreBlock::from_bits(vec![0, 1], &[raised.clone(), lowered]);
            let sc = stateful_scores(&s, &block, &message);
            prop_assert!(sc[0] > sc[1]);

            // negate d and complement every g̃ -> m - score
            let mut neg = s.clone();
            neg.d.iter_mut().for_each(|d| *d = -*d);
            let flipped: Vec<u8> = raised.iter().map(|g| 1 - g).collect();
            let block2 = ScoreBlock::from_bits(vec![0], &[flipped]);
            let mirrored = stateful_scores(&neg, &block2, &message)[0];
            prop_assert!((mirrored - (m as f64 - sc[0])).abs() < 1e-9);
        }

        #[test]
        fn stateful_is_permutation_invariant(seed in any::<u64>(), m in 2usize..16) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_state(&mut rng, m);
            let message = Message::random(m, &mut rng).unwrap();
            let raw: Vec<u8> = (0..m).map(|_| rng.gen_range(0..2)).collect();
            let perm: Vec<usize> = (0..m).rev().collect();
            let mut ps = s.clone();
            ps.d = perm.iter().map(|&i| s.d[i]).collect();
            let pm = Message::new(perm.iter().map(|&i| message.bit(i)).collect()).unwrap();
            let praw: Vec<u8> = perm.iter().map(|&i| raw[i]).collect();
            let a = stateful_scores(&s, &ScoreBlock::from_bits(vec![0], &[raw]), &message)[0];
            let b = stateful_scores(&ps, &ScoreBlock::from_bits(vec![0], &[praw]), &pm)[0];
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn reach_probability_matches_random_walk_with_split_ties() {
        // A final statistic of exactly zero is a coin flip for the decoder.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for n in [25u64, 100] {
            for d in [-6i64, -1, 0, 3] {
                let walks = 20_000;
                let mut correct = 0.0;
                for _ in 0..walks {
                    let ups = crate::stats::sample_binomial_half(n, &mut rng) as i64;
                    let end = d + 2 * ups - n as i64;
                    correct += match end.signum() {
                        1 => 1.0,
                        0 => 0.5,
                        _ => 0.0,
                    };
                }
                let empirical = correct / walks as f64;
                assert!(
                    (reach_probability(d, n) - empirical).abs() <= 0.02,
                    "d={d} n={n}"
                );
            }
        }
    }
}
