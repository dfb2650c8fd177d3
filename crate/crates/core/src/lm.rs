//! Synthetic language model and the watermarked generation loop.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Gamma};
use serde::{Deserialize, Serialize};

use crate::decoder::DecoderConfig;
use crate::encoder::{
    allocate_segment, complement_row, segment_mask, EncoderMode, EncoderState, StepScorer,
};
use crate::error::{Error, Result};
use crate::prf::{score_row, seed_at};
use crate::schemes::{
    red_green_weights, soft_ppl_argmax, solve_lambda, synthid_layers_sparse, LambdaSolution,
    SchemeConfig, SolverConfig,
};
use crate::types::{
    full_mask, sample_index, words_for, Distribution, Message, Token, Vocabulary, WatermarkKey,
};

pub const RECORD_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_VOCAB: usize = 1024;
pub const DEFAULT_ALPHA: f64 = 0.3;
pub const PROMPT_LENGTH: usize = 3;
/// Temperature and top-k shaping happen before the watermark transform.
pub const WATERMARK_AFTER_SHAPING: bool = true;

/// Serializable description of a toy LM.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LmSpec {
    /// Order-1 Markov chain, each row drawn from `Dirichlet(alpha)`; one extra
    /// row serves as the start-of-text law.
    Markov1 { vocab: usize, alpha: f64, seed: u64 },
    Uniform {
        vocab: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Explicit rows indexed by the previous token; `start` is used for an
    /// empty context (uniform when absent).
    FixedTable {
        rows: Vec<Vec<f64>>,
        #[serde(default)]
        start: Option<Vec<f64>>,
        #[serde(default)]
        seed: u64,
    },
}

impl Default for LmSpec {
    fn default() -> Self {
        Self::Markov1 {
            vocab: DEFAULT_VOCAB,
            alpha: DEFAULT_ALPHA,
            seed: 0,
        }
    }
}

impl LmSpec {
    pub fn build(&self) -> Result<ToyLm> {
        ToyLm::new(self.clone())
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Self::Markov1 { vocab, .. } | Self::Uniform { vocab, .. } => *vocab,
            Self::FixedTable { rows, .. } => rows.len(),
        }
    }
}

/// A seeded next-token model over `0..vocab`.
#[derive(Clone, Debug)]
pub struct ToyLm {
    spec: LmSpec,
    vocab: Vocabulary,
    /// `vocab + 1` rows; the last one is the start row. Empty for the
    /// uniform model.
    rows: Vec<Distribution>,
    seed: u64,
}

impl ToyLm {
    pub fn new(spec: LmSpec) -> Result<Self> {
        let vocab = Vocabulary::new(spec.vocab_size())?;
        let size = vocab.size();
        let (rows, seed) = match &spec {
            LmSpec::Markov1 { alpha, seed, .. } => {
                if !(*alpha > 0.0 && alpha.is_finite()) {
                    return Err(Error::InvalidParameter(format!(
                        "alpha must be > 0, got {alpha}"
                    )));
                }
                let gamma =
                    Gamma::new(*alpha, 1.0).map_err(|e| Error::InvalidParameter(e.to_string()))?;
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let rows = (0..=size)
                    .map(|_| dirichlet_row(&gamma, size, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                (rows, *seed)
            }
            LmSpec::Uniform { seed, .. } => (Vec::new(), *seed),
            LmSpec::FixedTable { rows, start, seed } => {
                let mut out = Vec::with_capacity(size + 1);
                for row in rows {
                    if row.len() != size {
                        return Err(Error::LengthMismatch {
                            left: row.len(),
                            right: size,
                        });
                    }
                    out.push(Distribution::validate(row.clone())?);
                }
                out.push(match start {
                    Some(p) if p.len() != size => {
                        return Err(Error::LengthMismatch {
                            left: p.len(),
                            right: size,
                        })
                    }
                    Some(p) => Distribution::validate(p.clone())?,
                    None => Distribution::uniform(size),
                });
                (out, *seed)
            }
        };
        Ok(Self {
            spec,
            vocab,
            rows,
            seed,
        })
    }

    pub fn spec(&self) -> &LmSpec {
        &self.spec
    }

    pub fn vocab(&self) -> Vocabulary {
        self.vocab
    }

    fn row_index(&self, context: &[Token]) -> usize {
        context.last().map_or(self.vocab.size(), |&t| t as usize)
    }

    /// Next-token law given everything generated so far.
    pub fn next_distribution(&self, context: &[Token]) -> Distribution {
        if self.rows.is_empty() {
            Distribution::uniform(self.vocab.size())
        } else {
            self.rows[self.row_index(context)].clone()
        }
    }

    fn next_probs(&self, context: &[Token]) -> std::borrow::Cow<'_, [f64]> {
        if self.rows.is_empty() {
            std::borrow::Cow::Owned(vec![1.0 / self.vocab.size() as f64; self.vocab.size()])
        } else {
            std::borrow::Cow::Borrowed(self.rows[self.row_index(context)].probs())
        }
    }

    /// The fixed prompt: `PROMPT_LENGTH` tokens sampled from the model itself
    /// with a stream derived from the model seed.
    pub fn prompt(&self) -> Vec<Token> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(u64::MAX);
        let mut prompt = Vec::with_capacity(PROMPT_LENGTH);
        for _ in 0..PROMPT_LENGTH {
            let t = sample_index(&self.next_probs(&prompt), &mut rng) as Token;
            prompt.push(t);
        }
        prompt
    }

    /// `exp(-(1/n) Σ ln p(token | context))` of `tokens` following `prompt`,
    /// under the unshaped model.
    pub fn perplexity(&self, prompt: &[Token], tokens: &[Token]) -> Result<f64> {
        Ok(self.log_perplexity(prompt, tokens)?.exp())
    }

    pub fn log_perplexity(&self, prompt: &[Token], tokens: &[Token]) -> Result<f64> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("sequence"));
        }
        let mut context: Vec<Token> = prompt.to_vec();
        let mut total = 0.0;
        for (position, &t) in tokens.iter().enumerate() {
            if t as usize >= self.vocab.size() {
                return Err(Error::TokenOutOfRange {
                    token: t,
                    position,
                    vocab: self.vocab.size(),
                });
            }
            let p = self.next_probs(&context)[t as usize];
            if p <= 0.0 {
                return Err(Error::ZeroProbabilityToken { position });
            }
            total += p.ln();
            context.push(t);
        }
        Ok(-total / tokens.len() as f64)
    }
}

fn dirichlet_row<R: Rng + ?Sized>(
    gamma: &Gamma<f64>,
    size: usize,
    rng: &mut R,
) -> Result<Distribution> {
    let mut weights: Vec<f64> = (0..size).map(|_| gamma.sample(rng)).collect();
    if weights.iter().sum::<f64>() <= 0.0 {
        // Every draw underflowed; fall back to a single token.
        weights[rng.gen_range(0..size)] = 1.0;
    }
    Distribution::from_weights(weights)
}

/// Temperature, top-k and length settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_min_tokens")]
    pub min_tokens: usize,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
}

fn default_temperature() -> f64 {
    0.7
}
fn default_top_k() -> usize {
    50
}
fn default_min_tokens() -> usize {
    250
}
fn default_max_tokens() -> usize {
    350
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            temperature: default_temperature(),
            top_k: default_top_k(),
            min_tokens: default_min_tokens(),
            max_tokens: default_max_tokens(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if self.top_k == 0 {
            return Err(Error::InvalidParameter("top_k must be >= 1".into()));
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return Err(Error::InvalidParameter(format!(
                "length bounds [{}, {}] are invalid",
                self.min_tokens, self.max_tokens
            )));
        }
        Ok(())
    }

    /// A length drawn uniformly from `[min_tokens, max_tokens]`.
    pub fn sample_length<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.gen_range(self.min_tokens..=self.max_tokens)
    }
}

/// Shaped law restricted to its support, tokens in increasing order.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseDistribution {
    pub tokens: Vec<Token>,
    pub probs: Vec<f64>,
}

impl SparseDistribution {
    pub fn to_dense(&self, size: usize) -> Distribution {
        let mut probs = vec![0.0; size];
        for (&t, &p) in self.tokens.iter().zip(&self.probs) {
            probs[t as usize] = p;
        }
        Distribution::from_weights(probs).expect("shaped law is non-empty")
    }
}

/// Temperature then top-k, returning only the surviving tokens.
pub fn shape_sparse(probs: &[f64], cfg: &SamplerConfig) -> SparseDistribution {
    let mut order: Vec<usize> = (0..probs.len()).filter(|&u| probs[u] > 0.0).collect();
    let by_prob = |&a: &usize, &b: &usize| probs[b].total_cmp(&probs[a]).then(a.cmp(&b));
    if order.len() > cfg.top_k {
        order.select_nth_unstable_by(cfg.top_k - 1, by_prob);
        order.truncate(cfg.top_k);
    }
    order.sort_unstable();
    let top = order.iter().map(|&u| probs[u]).fold(0.0, f64::max);
    // p^(1/τ) relative to the mode, so small temperatures do not underflow
    // the whole row.
    let mut weights: Vec<f64> = order
        .iter()
        .map(|&u| ((probs[u].ln() - top.ln()) / cfg.temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    let kept: Vec<usize> = (0..order.len()).filter(|&i| weights[i] > 0.0).collect();
    SparseDistribution {
        tokens: kept.iter().map(|&i| order[i] as Token).collect(),
        probs: kept.iter().map(|&i| weights[i]).collect(),
    }
}

/// Temperature then top-k (ties by lower token id), renormalized.
pub fn shape_distribution(p: &Distribution, cfg: &SamplerConfig) -> Distribution {
    shape_sparse(p.probs(), cfg).to_dense(p.len())
}

/// A model with its shaping applied to every row ahead of time.
#[derive(Clone, Debug)]
pub struct ShapedLm {
    lm: ToyLm,
    rows: Vec<SparseDistribution>,
}

impl ShapedLm {
    pub fn new(lm: ToyLm, cfg: &SamplerConfig) -> Self {
        let size = lm.vocab.size();
        let rows = if lm.rows.is_empty() {
            vec![shape_sparse(&vec![1.0 / size as f64; size], cfg)]
        } else {
            lm.rows
                .iter()
                .map(|r| shape_sparse(r.probs(), cfg))
                .collect()
        };
        Self { lm, rows }
    }

    pub fn lm(&self) -> &ToyLm {
        &self.lm
    }

    pub fn next(&self, context: &[Token]) -> &SparseDistribution {
        if self.rows.len() == 1 {
            &self.rows[0]
        } else {
            &self.rows[self.lm.row_index(context)]
        }
    }
}

/// Marks an attacked record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackAnnotation {
    pub kind: String,
    pub fraction: f64,
    pub seed: u64,
    pub original_length: usize,
}

/// Everything needed to decode and evaluate one generated text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationRecord {
    pub schema_version: u32,
    #[serde(default)]
    pub index: u64,
    pub prompt: Vec<Token>,
    pub completion: Vec<Token>,
    pub message: Message,
    pub scheme: SchemeConfig,
    pub encoder: EncoderMode,
    pub sampler: SamplerConfig,
    pub lm: LmSpec,
    pub context_window: usize,
    pub rng_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackAnnotation>,
}

impl GenerationRecord {
    pub fn vocab(&self) -> Result<Vocabulary> {
        Vocabulary::new(self.lm.vocab_size())
    }

    /// Decoder settings matching how this record was generated.
    pub fn decoder_config(&self) -> Result<DecoderConfig> {
        let mut cfg = DecoderConfig::new(self.message.len(), self.vocab()?);
        cfg.allocation = self.encoder.allocation(self.message.len())?;
        if let SchemeConfig::Synthid { n_layers, .. } = self.scheme {
            cfg.synthid_layers = Some(n_layers);
        }
        Ok(cfg)
    }
}

/// One step of generation as seen by the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTrace {
    /// Raw layer-0 score row of the emitted token.
    pub raw_row: Vec<u64>,
    pub lambda: Option<LambdaSolution>,
}

#[derive(Clone, Debug)]
pub struct GenerationOutput {
    pub record: GenerationRecord,
    pub trace: Option<Vec<StepTrace>>,
}

/// Inputs of one generation run.
#[derive(Clone, Debug)]
pub struct GenerationRequest<'a> {
    pub lm: &'a ShapedLm,
    pub key: &'a WatermarkKey,
    pub message: &'a Message,
    pub scheme: &'a SchemeConfig,
    pub encoder: &'a EncoderMode,
    pub sampler: &'a SamplerConfig,
    pub n_tokens: usize,
    pub seed: u64,
    pub trace: bool,
}

/// Rejects scheme/encoder pairs the generation loop does not support.
pub fn check_combination(scheme: &SchemeConfig, encoder: &EncoderMode, m: usize) -> Result<()> {
    scheme.validate()?;
    if let SchemeConfig::Synthid { allow_stateful, .. } = scheme {
        if encoder.is_stateful() && !allow_stateful {
            return Err(Error::IllegalCombination(
                "the stateful encoder is disabled for synthid unless allow_stateful is set".into(),
            ));
        }
    }
    if let EncoderMode::Stateful { horizons } = encoder {
        EncoderState::with_horizons(m, horizons.clone())?;
    }
    encoder.allocation(m)?;
    Ok(())
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Generates `n_tokens` watermarked tokens.
///
/// The score context of each position is the preceding completion tokens
/// only (padded with the sentinel at the start); the prompt conditions the
/// model but is never hashed.
pub fn generate(req: &GenerationRequest<'_>) -> Result<GenerationOutput> {
    let m = req.message.len();
    check_combination(req.scheme, req.encoder, m)?;
    req.sampler.validate()?;
    if req.n_tokens == 0 {
        return Err(Error::InvalidParameter("n_tokens must be >= 1".into()));
    }
    let lm = req.lm.lm();
    let vocab = lm.vocab();
    let allocation = req.encoder.allocation(m)?;
    let mut state = match req.encoder {
        EncoderMode::Stateful { horizons } => {
            Some(EncoderState::with_horizons(m, horizons.clone())?)
        }
        _ => None,
    };
    let mut sampling = stream(req.seed, 0);
    let mut solver_rng = stream(req.seed, 1);
    let mut tie_rng = stream(req.seed, 2);
    let solver_cfg = match *req.scheme {
        SchemeConfig::SoftPpl {
            mc_samples,
            iterations,
            ..
        } => SolverConfig {
            mc_samples,
            iterations,
        },
        _ => SolverConfig::default(),
    };

    let prompt = lm.prompt();
    let mut context = prompt.clone();
    let mut completion: Vec<Token> = Vec::with_capacity(req.n_tokens);
    let mut trace = req.trace.then(|| Vec::with_capacity(req.n_tokens));
    let message_words = req.message.words();
    let full = full_mask(m);
    let words = words_for(m);
    let mut raw = vec![0u64; words];
    let mut rows: Vec<u64> = Vec::new();
    let mut scores: Vec<f64> = Vec::new();
    let mut log_probs: Vec<f64> = Vec::new();

    for t in 0..req.n_tokens {
        let shaped = req.lm.next(&context);
        let seed = seed_at(req.key, vocab, &completion, t);
        let scorer = match (&state, allocation.enabled) {
            (Some(s), _) => StepScorer::stateful(s),
            (None, true) => StepScorer::counting(segment_mask(
                m,
                allocation.segments,
                allocate_segment(seed, &allocation),
            )),
            (None, false) => StepScorer::counting(full.clone()),
        };

        rows.clear();
        rows.resize(shaped.tokens.len() * words, 0);
        scores.clear();
        if req.scheme.is_watermarked() {
            for (row, &u) in rows.chunks_exact_mut(words).zip(&shaped.tokens) {
                score_row(seed, u, m, 0, &mut raw);
                complement_row(&raw, &message_words, &full, row);
                scores.push(scorer.score(row));
            }
        }

        let mut lambda = None;
        let choice = match *req.scheme {
            SchemeConfig::Unwatermarked => sample_index(&shaped.probs, &mut sampling),
            SchemeConfig::RedGreen { delta } => sample_index(
                &red_green_weights(&shaped.probs, &scores, delta),
                &mut sampling,
            ),
            SchemeConfig::SoftPpl { epsilon, .. } => {
                let solution =
                    solve_lambda(&shaped.probs, &scorer, epsilon, solver_cfg, &mut solver_rng);
                lambda = Some(solution);
                log_probs.clear();
                log_probs.extend(shaped.probs.iter().map(|p| p.ln()));
                soft_ppl_argmax(&log_probs, &scores, solution.lambda, &mut tie_rng)
            }
            SchemeConfig::SoftPplUnconstrained { lambda: l } => {
                log_probs.clear();
                log_probs.extend(shaped.probs.iter().map(|p| p.ln()));
                soft_ppl_argmax(&log_probs, &scores, l, &mut tie_rng)
            }
            SchemeConfig::Synthid { n_layers, .. } => {
                let q = synthid_layers_sparse(
                    &shaped.probs,
                    &shaped.tokens,
                    seed,
                    req.message,
                    n_layers,
                    &scorer,
                );
                sample_index(&q, &mut sampling)
            }
        };
        let token = shaped.tokens[choice];

        if let Some(s) = state.as_mut() {
            s.update_packed(&rows[choice * words..(choice + 1) * words]);
        }
        if let Some(tr) = trace.as_mut() {
            score_row(seed, token, m, 0, &mut raw);
            tr.push(StepTrace {
                raw_row: raw.clone(),
                lambda,
            });
        }
        completion.push(token);
        context.push(token);
    }

    Ok(GenerationOutput {
        record: GenerationRecord {
            schema_version: RECORD_SCHEMA_VERSION,
            index: 0,
            prompt,
            completion,
            message: req.message.clone(),
            scheme: req.scheme.clone(),
            encoder: req.encoder.clone(),
            sampler: req.sampler.clone(),
            lm: lm.spec().clone(),
            context_window: req.key.context_window(),
            rng_seed: req.seed,
            attack: None,
        },
        trace,
    })
}

/// First line of every JSON-lines file written by this crate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JsonlHeader {
    pub schema_version: u32,
    #[serde(rename = "type")]
    pub kind: String,
    pub content: String,
}

pub fn write_jsonl_header<W: Write>(out: &mut W, content: &str) -> std::io::Result<()> {
    let header = JsonlHeader {
        schema_version: RECORD_SCHEMA_VERSION,
        kind: "header".into(),
        content: content.into(),
    };
    writeln!(out, "{}", serde_json::to_string(&header)?)
}

pub fn write_jsonl<W: Write, T: Serialize>(out: &mut W, item: &T) -> std::io::Result<()> {
    writeln!(out, "{}", serde_json::to_string(item)?)
}

/// Whether a JSON-lines line is a header rather than data.
pub fn is_header_line(line: &str) -> bool {
    serde_json::from_str::<serde_json::Value>(line)
        .ok()
        .and_then(|v| {
            v.get("type")
                .and_then(|t| t.as_str())
                .map(|t| t == "header")
        })
        .unwrap_or(false)
}

/// Parses the data lines of a JSON-lines stream; each entry carries the
/// 1-based line number and either the record or the parse error.
pub fn read_jsonl<R: BufRead, T: for<'de> Deserialize<'de>>(
    input: R,
) -> std::io::Result<Vec<(usize, std::result::Result<T, String>)>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || is_header_line(&line) {
            continue;
        }
        out.push((
            i + 1,
            serde_json::from_str(&line).map_err(|e| e.to_string()),
        ));
    }
    Ok(out)
}
