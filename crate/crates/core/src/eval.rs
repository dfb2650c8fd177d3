//! Metrics over decoded records and the experiment sweep runner.

use std::collections::HashMap;
use std::io::Write;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::AttackConfig;
use crate::decoder::{DetectionReport, Detector, DEFAULT_MC_SAMPLES};
use crate::encoder::EncoderMode;
use crate::error::{Error, Result};
use crate::lm::{generate, GenerationRecord, GenerationRequest, LmSpec, SamplerConfig, ShapedLm};
use crate::schemes::SchemeConfig;
use crate::stats::wilson_interval;
use crate::types::{Message, WatermarkKey};

pub const CSV_SCHEMA_LINE: &str = "#schema_version=1";
/// Significance levels reported in every metric row.
pub const REPORT_ALPHAS: [f64; 2] = [0.01, 0.05];

/// Fraction of positions where the two messages agree.
pub fn bit_accuracy(message: &Message, decoded: &Message) -> Result<f64> {
    if message.len() != decoded.len() {
        return Err(Error::LengthMismatch {
            left: message.len(),
            right: decoded.len(),
        });
    }
    let correct = message
        .bits()
        .iter()
        .zip(decoded.bits())
        .filter(|(a, b)| a == b)
        .count();
    Ok(correct as f64 / message.len() as f64)
}

/// Decode results of one record, reduced to what the metrics need.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordOutcome {
    pub index: u64,
    pub watermarked: bool,
    pub correct: Vec<bool>,
    pub per_bit_pvalues: Vec<f64>,
    pub zero_bit_pvalue: f64,
    pub effective_length: usize,
    pub log_perplexity: Option<f64>,
}

impl RecordOutcome {
    pub fn new(
        index: u64,
        watermarked: bool,
        message: &Message,
        report: &DetectionReport,
    ) -> Result<Self> {
        if message.len() != report.decoded.len() {
            return Err(Error::LengthMismatch {
                left: message.len(),
                right: report.decoded.len(),
            });
        }
        Ok(Self {
            index,
            watermarked,
            correct: message
                .bits()
                .iter()
                .zip(report.decoded.bits())
                .map(|(a, b)| a == b)
                .collect(),
            per_bit_pvalues: report.per_bit_pvalues.clone(),
            zero_bit_pvalue: report.zero_bit_pvalue,
            effective_length: report.effective_length,
            log_perplexity: None,
        })
    }

    pub fn bit_accuracy(&self) -> f64 {
        self.correct.iter().filter(|&&c| c).count() as f64 / self.correct.len() as f64
    }

    pub fn exact(&self) -> bool {
        self.correct.iter().all(|&c| c)
    }

    /// Bits that are correct and individually significant at `alpha`.
    pub fn significant_correct(&self, alpha: f64) -> usize {
        self.correct
            .iter()
            .zip(&self.per_bit_pvalues)
            .filter(|(&c, &p)| c && p < alpha)
            .count()
    }
}

fn non_empty<T>(items: &[T], what: &'static str) -> Result<()> {
    if items.is_empty() {
        return Err(Error::EmptyInput(what));
    }
    Ok(())
}

/// Mean over records of the per-record bit accuracy.
pub fn mean_bit_accuracy(outcomes: &[RecordOutcome]) -> Result<f64> {
    non_empty(outcomes, "records")?;
    Ok(outcomes
        .iter()
        .map(RecordOutcome::bit_accuracy)
        .sum::<f64>()
        / outcomes.len() as f64)
}

/// Fraction of records decoded without any bit error.
pub fn message_accuracy(outcomes: &[RecordOutcome]) -> Result<f64> {
    non_empty(outcomes, "records")?;
    Ok(outcomes.iter().filter(|o| o.exact()).count() as f64 / outcomes.len() as f64)
}

/// Mean over all (record, bit) pairs of `correct ∧ p < alpha`.
pub fn ba_at_fpr(outcomes: &[RecordOutcome], alpha: f64) -> Result<f64> {
    non_empty(outcomes, "records")?;
    let bits: usize = outcomes.iter().map(|o| o.correct.len()).sum();
    let hits: usize = outcomes.iter().map(|o| o.significant_correct(alpha)).sum();
    Ok(hits as f64 / bits as f64)
}

/// Fraction of zero-bit p-values below `alpha`.
pub fn tpr_at_fpr(pvalues: &[f64], alpha: f64) -> Result<f64> {
    non_empty(pvalues, "p-values")?;
    Ok(pvalues.iter().filter(|&&p| p < alpha).count() as f64 / pvalues.len() as f64)
}

pub const MIN_CALIBRATION_SAMPLES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub alpha: f64,
    pub empirical_fpr: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
}

/// Empirical rate of `p <= alpha` over null p-values for each `alpha` in a
/// sorted grid, with Wilson 95% intervals.
pub fn calibration_curve(null_pvalues: &[f64], alphas: &[f64]) -> Result<Vec<CalibrationPoint>> {
    if null_pvalues.len() < MIN_CALIBRATION_SAMPLES {
        return Err(Error::InvalidParameter(format!(
            "calibration needs at least {MIN_CALIBRATION_SAMPLES} null samples, got {}",
            null_pvalues.len()
        )));
    }
    if alphas.windows(2).any(|w| w[0] > w[1]) || alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(Error::InvalidParameter(
            "alpha grid must be sorted and within [0, 1]".into(),
        ));
    }
    let mut sorted = null_pvalues.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(alphas
        .iter()
        .map(|&alpha| {
            let flagged = sorted.partition_point(|&p| p <= alpha);
            let (ci_low, ci_high) = wilson_interval(flagged as u64, sorted.len() as u64);
            CalibrationPoint {
                alpha,
                empirical_fpr: flagged as f64 / sorted.len() as f64,
                ci_low,
                ci_high,
                n: sorted.len(),
            }
        })
        .collect())
}

/// Aggregated metrics of one sweep cell or record group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub fingerprint: String,
    pub scheme: String,
    pub encoder: String,
    pub m: usize,
    pub n_tokens: usize,
    pub attack: String,
    pub attack_fraction: f64,
    pub n_samples: usize,
    pub n_watermarked: usize,
    pub n_null: usize,
    pub n_failed: usize,
    pub bit_accuracy: Option<f64>,
    pub message_accuracy: Option<f64>,
    pub ba_at_fpr: Vec<(f64, f64)>,
    pub tpr_at_fpr: Vec<(f64, f64)>,
    pub fpr_at: Vec<(f64, f64)>,
    pub mean_log_perplexity: Option<f64>,
    pub error: Option<String>,
}

/// CSV column order of [`MetricRow`].
pub const METRIC_COLUMNS: [&str; 21] = [
    "fingerprint",
    "scheme",
    "encoder",
    "m",
    "n_tokens",
    "attack",
    "attack_fraction",
    "n_samples",
    "n_watermarked",
    "n_null",
    "n_failed",
    "bit_accuracy",
    "message_accuracy",
    "ba_at_1pct_fpr",
    "ba_at_5pct_fpr",
    "tpr_at_1pct_fpr",
    "tpr_at_5pct_fpr",
    "fpr_at_1pct",
    "fpr_at_5pct",
    "mean_log_perplexity",
    "error",
];

fn lookup(pairs: &[(f64, f64)], alpha: f64) -> Option<f64> {
    pairs.iter().find(|(a, _)| *a == alpha).map(|&(_, v)| v)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or(String::new(), |v| format!("{v}"))
}

impl MetricRow {
    /// Summarizes outcomes. Accuracy metrics use the watermarked records
    /// when there are any, otherwise all records; TPR uses watermarked
    /// records and FPR the unwatermarked ones.
    pub fn from_outcomes(info: RowInfo, outcomes: &[RecordOutcome], n_failed: usize) -> Self {
        let marked: Vec<RecordOutcome> =
            outcomes.iter().filter(|o| o.watermarked).cloned().collect();
        let null: Vec<f64> = outcomes
            .iter()
            .filter(|o| !o.watermarked)
            .map(|o| o.zero_bit_pvalue)
            .collect();
        let basis = if marked.is_empty() {
            outcomes
        } else {
            &marked[..]
        };
        let marked_p: Vec<f64> = marked.iter().map(|o| o.zero_bit_pvalue).collect();
        let ppl: Vec<f64> = outcomes.iter().filter_map(|o| o.log_perplexity).collect();
        Self {
            fingerprint: info.fingerprint,
            scheme: info.scheme,
            encoder: info.encoder,
            m: info.m,
            n_tokens: info.n_tokens,
            attack: info.attack,
            attack_fraction: info.attack_fraction,
            n_samples: outcomes.len(),
            n_watermarked: marked.len(),
            n_null: null.len(),
            n_failed,
            bit_accuracy: mean_bit_accuracy(basis).ok(),
            message_accuracy: message_accuracy(basis).ok(),
            ba_at_fpr: REPORT_ALPHAS
                .iter()
                .filter_map(|&a| ba_at_fpr(basis, a).ok().map(|v| (a, v)))
                .collect(),
            tpr_at_fpr: REPORT_ALPHAS
                .iter()
                .filter_map(|&a| tpr_at_fpr(&marked_p, a).ok().map(|v| (a, v)))
                .collect(),
            fpr_at: REPORT_ALPHAS
                .iter()
                .filter_map(|&a| tpr_at_fpr(&null, a).ok().map(|v| (a, v)))
                .collect(),
            mean_log_perplexity: (!ppl.is_empty())
                .then(|| ppl.iter().sum::<f64>() / ppl.len() as f64),
            error: None,
        }
    }

    pub fn failed(info: RowInfo, error: String) -> Self {
        Self {
            fingerprint: info.fingerprint,
            scheme: info.scheme,
            encoder: info.encoder,
            m: info.m,
            n_tokens: info.n_tokens,
            attack: info.attack,
            attack_fraction: info.attack_fraction,
            n_samples: 0,
            n_watermarked: 0,
            n_null: 0,
            n_failed: 0,
            bit_accuracy: None,
            message_accuracy: None,
            ba_at_fpr: Vec::new(),
            tpr_at_fpr: Vec::new(),
            fpr_at: Vec::new(),
            mean_log_perplexity: None,
            error: Some(error),
        }
    }

    pub fn csv_fields(&self) -> Vec<String> {
        vec![
            self.fingerprint.clone(),
            self.scheme.clone(),
            self.encoder.clone(),
            self.m.to_string(),
            self.n_tokens.to_string(),
            self.attack.clone(),
            self.attack_fraction.to_string(),
            self.n_samples.to_string(),
            self.n_watermarked.to_string(),
            self.n_null.to_string(),
            self.n_failed.to_string(),
            fmt_opt(self.bit_accuracy),
            fmt_opt(self.message_accuracy),
            fmt_opt(lookup(&self.ba_at_fpr, 0.01)),
            fmt_opt(lookup(&self.ba_at_fpr, 0.05)),
            fmt_opt(lookup(&self.tpr_at_fpr, 0.01)),
            fmt_opt(lookup(&self.tpr_at_fpr, 0.05)),
            fmt_opt(lookup(&self.fpr_at, 0.01)),
            fmt_opt(lookup(&self.fpr_at, 0.05)),
            fmt_opt(self.mean_log_perplexity),
            self.error.clone().unwrap_or_default(),
        ]
    }
}

/// Descriptive columns of a metric row.
#[derive(Clone, Debug, PartialEq)]
pub struct RowInfo {
    pub fingerprint: String,
    pub scheme: String,
    pub encoder: String,
    pub m: usize,
    pub n_tokens: usize,
    pub attack: String,
    pub attack_fraction: f64,
}

/// CSV writer that emits the schema line and header before the first row.
pub struct MetricWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> MetricWriter<W> {
    pub fn new(mut out: W) -> std::io::Result<Self> {
        writeln!(out, "{CSV_SCHEMA_LINE}")?;
        let mut inner = csv::Writer::from_writer(out);
        inner.write_record(METRIC_COLUMNS)?;
        inner.flush()?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, row: &MetricRow) -> std::io::Result<()> {
        self.inner.write_record(row.csv_fields())?;
        self.inner.flush()
    }

    pub fn into_inner(self) -> std::io::Result<W> {
        self.inner.into_inner().map_err(|e| e.into_error())
    }
}

pub fn write_calibration_csv<W: Write>(out: W, points: &[CalibrationPoint]) -> std::io::Result<()> {
    let mut out = out;
    writeln!(out, "{CSV_SCHEMA_LINE}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["alpha", "empirical_fpr", "ci_low", "ci_high", "n"])?;
    for p in points {
        w.write_record([
            p.alpha.to_string(),
            p.empirical_fpr.to_string(),
            p.ci_low.to_string(),
            p.ci_high.to_string(),
            p.n.to_string(),
        ])?;
    }
    w.flush()
}

/// One point of an experiment grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepCell {
    pub scheme: SchemeConfig,
    #[serde(default = "default_encoder")]
    pub encoder: EncoderMode,
    pub m: usize,
    pub n_tokens: usize,
    #[serde(default)]
    pub attack: Option<AttackConfig>,
    #[serde(default)]
    pub lm: LmSpec,
    #[serde(default)]
    pub sampler: SamplerConfig,
}

fn default_encoder() -> EncoderMode {
    EncoderMode::Stateless
}

impl SweepCell {
    pub fn new(scheme: SchemeConfig, encoder: EncoderMode, m: usize, n_tokens: usize) -> Self {
        Self {
            scheme,
            encoder,
            m,
            n_tokens,
            attack: None,
            lm: LmSpec::default(),
            sampler: SamplerConfig::default(),
        }
    }

    pub fn with_attack(mut self, attack: Option<AttackConfig>) -> Self {
        self.attack = attack;
        self
    }

    pub fn fingerprint(&self) -> String {
        fingerprint_of(self)
    }

    fn generation_part(&self) -> String {
        fingerprint_of(&(
            &self.scheme,
            &self.encoder,
            self.m,
            self.n_tokens,
            &self.lm,
            &self.sampler,
        ))
    }

    fn info(&self) -> RowInfo {
        RowInfo {
            fingerprint: self.fingerprint(),
            scheme: self.scheme.label(),
            encoder: self.encoder.label(),
            m: self.m,
            n_tokens: self.n_tokens,
            attack: self.attack.map_or("none".into(), |a| a.kind.label().into()),
            attack_fraction: self.attack.map_or(0.0, |a| a.fraction),
        }
    }
}

/// First 16 hex digits of the BLAKE3 hash of the JSON form.
pub fn fingerprint_of<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("serializable");
    blake3::hash(&json).to_hex()[..16].to_string()
}

/// Shared settings of a sweep.
#[derive(Clone, Debug)]
pub struct SweepConfig {
    pub cells: Vec<SweepCell>,
    pub runs: usize,
    pub master_seed: u64,
    pub key: WatermarkKey,
    pub mc_samples: usize,
    pub perplexity: bool,
}

impl SweepConfig {
    pub fn new(cells: Vec<SweepCell>, runs: usize, master_seed: u64, key: WatermarkKey) -> Self {
        Self {
            cells,
            runs,
            master_seed,
            key,
            mc_samples: DEFAULT_MC_SAMPLES,
            perplexity: true,
        }
    }
}

/// Purposes of per-record seeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum SeedPurpose {
    Generation = 0,
    Message = 1,
    Attack = 2,
    Decoder = 3,
}

/// Seed for record `index` of a sweep. Independent of the cell, so every
/// cell sees the same messages and sampling streams (paired comparisons).
pub fn record_seed(master: u64, index: u64, purpose: SeedPurpose) -> u64 {
    let mut h = blake3::Hasher::new();
    h.update(b"binomark/record");
    h.update(&master.to_le_bytes());
    h.update(&index.to_le_bytes());
    h.update(&[purpose as u8]);
    u64::from_le_bytes(h.finalize().as_bytes()[..8].try_into().unwrap())
}

pub fn record_message(master: u64, index: u64, m: usize) -> Result<Message> {
    let mut rng = ChaCha8Rng::seed_from_u64(record_seed(master, index, SeedPurpose::Message));
    Message::random(m, &mut rng)
}

/// Result of one sweep cell.
#[derive(Clone, Debug)]
pub struct CellResult {
    pub cell: SweepCell,
    pub row: MetricRow,
    pub outcomes: Vec<RecordOutcome>,
    pub records: Arc<Vec<GenerationRecord>>,
}

/// Builds the detector matching how `record` was generated.
pub fn detector_for(
    record: &GenerationRecord,
    key: &WatermarkKey,
    mc_samples: usize,
    seed: u64,
) -> Result<Detector> {
    let mut cfg = record.decoder_config()?;
    cfg.mc_samples = mc_samples;
    cfg.mc_seed = seed;
    cfg.tie_seed = seed;
    Detector::new(key.clone().with_context_window(record.context_window)?, cfg)
}

/// Decodes records and reduces each to an outcome; failures are counted.
pub fn evaluate_records(
    records: &[GenerationRecord],
    detector: &Detector,
    lm: Option<&ShapedLm>,
) -> (Vec<RecordOutcome>, usize) {
    let results: Vec<Option<RecordOutcome>> = records
        .par_iter()
        .map(|r| {
            let report = detector.detect(&r.completion).ok()?;
            let mut outcome =
                RecordOutcome::new(r.index, r.scheme.is_watermarked(), &r.message, &report).ok()?;
            if let Some(lm) = lm {
                outcome.log_perplexity = lm.lm().log_perplexity(&r.prompt, &r.completion).ok();
            }
            Some(outcome)
        })
        .collect();
    let failed = results.iter().filter(|r| r.is_none()).count();
    (results.into_iter().flatten().collect(), failed)
}

fn generate_cell(
    cell: &SweepCell,
    cfg: &SweepConfig,
    lm: &ShapedLm,
) -> Result<Vec<GenerationRecord>> {
    (0..cfg.runs as u64)
        .into_par_iter()
        .map(|i| {
            let message = record_message(cfg.master_seed, i, cell.m)?;
            let out = generate(&GenerationRequest {
                lm,
                key: &cfg.key,
                message: &message,
                scheme: &cell.scheme,
                encoder: &cell.encoder,
                sampler: &cell.sampler,
                n_tokens: cell.n_tokens,
                seed: record_seed(cfg.master_seed, i, SeedPurpose::Generation),
                trace: false,
            })?;
            let mut record = out.record;
            record.index = i;
            Ok(record)
        })
        .collect()
}

fn attack_records(
    records: &[GenerationRecord],
    attack: &AttackConfig,
    master: u64,
) -> Result<Vec<GenerationRecord>> {
    records
        .par_iter()
        .map(|r| {
            let seeded = AttackConfig {
                seed: record_seed(master ^ attack.seed, r.index, SeedPurpose::Attack),
                ..*attack
            };
            seeded.apply_to_record(r)
        })
        .collect()
}

/// Runs every cell in order, calling `sink` as soon as a cell finishes.
///
/// Generation is shared between cells that differ only in their attack.
/// A failing cell yields a row with its error and the sweep continues.
pub fn run_sweep<F: FnMut(&CellResult)>(cfg: &SweepConfig, mut sink: F) -> Result<Vec<CellResult>> {
    if cfg.cells.is_empty() {
        return Err(Error::EmptyInput("sweep grid"));
    }
    if cfg.runs == 0 {
        return Err(Error::InvalidParameter("runs must be >= 1".into()));
    }
    let mut models: HashMap<String, Arc<ShapedLm>> = HashMap::new();
    let mut generated: HashMap<String, Arc<Vec<GenerationRecord>>> = HashMap::new();
    let mut results = Vec::with_capacity(cfg.cells.len());
    let detector_seed = record_seed(cfg.master_seed, u64::MAX, SeedPurpose::Decoder);
    for cell in &cfg.cells {
        let result = (|| -> Result<CellResult> {
            let lm_key = fingerprint_of(&(&cell.lm, &cell.sampler));
            let lm = match models.get(&lm_key) {
                Some(lm) => lm.clone(),
                None => {
                    cell.sampler.validate()?;
                    let lm = Arc::new(ShapedLm::new(cell.lm.build()?, &cell.sampler));
                    models.insert(lm_key, lm.clone());
                    lm
                }
            };
            let gen_key = cell.generation_part();
            let base = match generated.get(&gen_key) {
                Some(records) => records.clone(),
                None => {
                    let records = Arc::new(generate_cell(cell, cfg, &lm)?);
                    generated.insert(gen_key, records.clone());
                    records
                }
            };
            let records = match &cell.attack {
                Some(attack) => Arc::new(attack_records(&base, attack, cfg.master_seed)?),
                None => base,
            };
            let detector = detector_for(&records[0], &cfg.key, cfg.mc_samples, detector_seed)?;
            let (outcomes, failed) =
                evaluate_records(&records, &detector, cfg.perplexity.then_some(&*lm));
            Ok(CellResult {
                cell: cell.clone(),
                row: MetricRow::from_outcomes(cell.info(), &outcomes, failed),
                outcomes,
                records,
            })
        })();
        let result = result.unwrap_or_else(|e| CellResult {
            cell: cell.clone(),
            row: MetricRow::failed(cell.info(), e.to_string()),
            outcomes: Vec::new(),
            records: Arc::new(Vec::new()),
        });
        sink(&result);
        results.push(result);
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::REPORT_SCHEMA_VERSION;
    use crate::stats::sample_binomial_half;
    use rand::Rng;

    fn outcome(correct: Vec<bool>, pvalues: Vec<f64>) -> RecordOutcome {
        RecordOutcome {
            index: 0,
            watermarked: true,
            correct,
            per_bit_pvalues: pvalues,
            zero_bit_pvalue: 0.5,
            effective_length: 10,
            log_perplexity: None,
        }
    }

    #[test]
    fn bit_accuracy_examples() {
        let m = Message::from_bit_str("1010").unwrap();
        assert_eq!(bit_accuracy(&m, &m).unwrap(), 1.0);
        assert_eq!(bit_accuracy(&m, &m.complement()).unwrap(), 0.0);
        let one_off = Message::from_bit_str("1011").unwrap();
        assert_eq!(bit_accuracy(&m, &one_off).unwrap(), 0.75);
        let short = Message::from_bit_str("10").unwrap();
        assert!(matches!(
            bit_accuracy(&m, &short),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn message_accuracy_examples() {
        let all = vec![outcome(vec![true; 4], vec![0.0; 4]); 3];
        assert_eq!(message_accuracy(&all).unwrap(), 1.0);
        let none = vec![outcome(vec![true, false], vec![0.0; 2]); 3];
        assert_eq!(message_accuracy(&none).unwrap(), 0.0);
        assert!(message_accuracy(&[]).is_err());
    }

    #[test]
    fn message_accuracy_follows_independent_bit_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, m, n) = (0.9, 8, 20_000);
        let outcomes: Vec<RecordOutcome> = (0..n)
            .map(|_| outcome((0..m).map(|_| rng.gen_bool(a)).collect(), vec![1.0; m]))
            .collect();
        let expected = a.powi(m as i32);
        let sd = (expected * (1.0 - expected) / n as f64).sqrt();
        assert!((message_accuracy(&outcomes).unwrap() - expected).abs() < 4.0 * sd);
    }

    #[test]
    fn ba_at_fpr_examples() {
        let perfect = vec![outcome(vec![true; 4], vec![0.0; 4])];
        assert_eq!(ba_at_fpr(&perfect, 0.01).unwrap(), 1.0);
        let weak = vec![outcome(vec![true; 4], vec![1.0; 4])];
        assert_eq!(ba_at_fpr(&weak, 0.01).unwrap(), 0.0);
    }

    #[test]
    fn ba_on_null_tables_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 200;
        let outcomes: Vec<RecordOutcome> = (0..1000)
            .map(|_| {
                let counts: Vec<u64> = (0..16).map(|_| sample_binomial_half(n, &mut rng)).collect();
                outcome(
                    counts
                        .iter()
                        .map(|&s| (2 * s > n) == rng.gen_bool(0.5))
                        .collect(),
                    counts
                        .iter()
                        .map(|&s| crate::stats::binom_two_sided_pvalue(s, n))
                        .collect(),
                )
            })
            .collect();
        let alpha: f64 = 0.01;
        let bound = alpha + 3.0 * (alpha * (1.0 - alpha) / 16_000.0).sqrt();
        assert!(ba_at_fpr(&outcomes, alpha).unwrap() <= bound);
    }

    #[test]
    fn tpr_examples() {
        assert_eq!(tpr_at_fpr(&[0.001, 0.002], 0.01).unwrap(), 1.0);
        assert_eq!(tpr_at_fpr(&[0.5, 0.002], 0.01).unwrap(), 0.5);
        assert!(tpr_at_fpr(&[], 0.01).is_err());
    }

    #[test]
    fn calibration_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p: Vec<f64> = (0..500).map(|_| rng.gen::<f64>()).collect();
        let curve = calibration_curve(&p, &[0.01, 0.05, 0.1, 0.5, 1.0]).unwrap();
        assert_eq!(curve.last().unwrap().empirical_fpr, 1.0);
        assert!(curve
            .windows(2)
            .all(|w| w[0].empirical_fpr <= w[1].empirical_fpr));
        assert!(calibration_curve(&p[..50], &[0.1]).is_err());
        assert!(calibration_curve(&p, &[0.1, 0.05]).is_err());
    }

    #[test]
    fn exact_per_bit_test_is_under_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 200;
        let p: Vec<f64> = (0..20_000)
            .map(|_| crate::stats::binom_two_sided_pvalue(sample_binomial_half(n, &mut rng), n))
            .collect();
        let grid = [0.001, 0.01, 0.05, 0.1, 0.2, 0.5];
        for point in calibration_curve(&p, &grid).unwrap() {
            let sd = (point.alpha * (1.0 - point.alpha) / p.len() as f64).sqrt();
            assert!(point.empirical_fpr <= point.alpha + 3.0 * sd, "{point:?}");
        }
    }

    proptest::proptest! {
        #[test]
        fn metric_invariants(
            rows in proptest::collection::vec(proptest::collection::vec((proptest::bool::ANY, 0.0f64..1.0), 6), 1..30),
            shift in 0usize..30,
        ) {
            let outcomes: Vec<RecordOutcome> = rows
                .iter()
                .map(|r| outcome(r.iter().map(|x| x.0).collect(), r.iter().map(|x| x.1).collect()))
                .collect();
            let ba = ba_at_fpr(&outcomes, 0.05).unwrap();
            let acc = mean_bit_accuracy(&outcomes).unwrap();
            proptest::prop_assert!(ba <= acc + 1e-12);
            let exact = message_accuracy(&outcomes).unwrap();
            for i in 0..6 {
                let per_bit = outcomes.iter().filter(|o| o.correct[i]).count() as f64 / outcomes.len() as f64;
                proptest::prop_assert!(exact <= per_bit + 1e-12);
            }
            let mut rotated = outcomes.clone();
            rotated.rotate_left(shift % outcomes.len());
            proptest::prop_assert!((mean_bit_accuracy(&rotated).unwrap() - acc).abs() < 1e-12);
            proptest::prop_assert_eq!(message_accuracy(&rotated).unwrap(), exact);
            proptest::prop_assert!((ba_at_fpr(&rotated, 0.05).unwrap() - ba).abs() < 1e-12);
        }
    }

    #[test]
    fn record_outcome_counts_correct_bits() {
        let m = Message::from_bit_str("1100").unwrap();
        let report = DetectionReport {
            schema_version: REPORT_SCHEMA_VERSION,
            decoded: Message::from_bit_str("1101").unwrap(),
            per_bit_pvalues: vec![0.001, 0.5, 0.001, 0.001],
            per_bit_counts: vec![0; 4],
            per_bit_trials: vec![10; 4],
            effective_length: 10,
            zero_bit_statistic: 1.0,
            zero_bit_pvalue: 0.2,
            weighted_means: None,
        };
        let o = RecordOutcome::new(0, true, &m, &report).unwrap();
        assert_eq!(o.bit_accuracy(), 0.75);
        assert_eq!(o.significant_correct(0.01), 2);
    }

    fn small_cell(scheme: SchemeConfig, encoder: EncoderMode) -> SweepCell {
        let mut cell = SweepCell::new(scheme, encoder, 8, 40);
        cell.lm = LmSpec::Markov1 {
            vocab: 128,
            alpha: 0.3,
            seed: 1,
        };
        cell
    }

    fn small_sweep(cells: Vec<SweepCell>) -> SweepConfig {
        let mut cfg = SweepConfig::new(cells, 6, 42, WatermarkKey::new([3; 32], 3).unwrap());
        cfg.mc_samples = 1000;
        cfg
    }

    #[test]
    fn singleton_sweep_matches_direct_run() {
        let cell = small_cell(
            SchemeConfig::RedGreen { delta: 3.0 },
            EncoderMode::Stateless,
        );
        let cfg = small_sweep(vec![cell.clone()]);
        let results = run_sweep(&cfg, |_| {}).unwrap();
        let lm = ShapedLm::new(cell.lm.build().unwrap(), &cell.sampler);
        for (i, record) in results[0].records.iter().enumerate() {
            let message = record_message(42, i as u64, 8).unwrap();
            let direct = generate(&GenerationRequest {
                lm: &lm,
                key: &cfg.key,
                message: &message,
                scheme: &cell.scheme,
                encoder: &cell.encoder,
                sampler: &cell.sampler,
                n_tokens: cell.n_tokens,
                seed: record_seed(42, i as u64, SeedPurpose::Generation),
                trace: false,
            })
            .unwrap();
            assert_eq!(direct.record.completion, record.completion);
        }
        let again = run_sweep(&cfg, |_| {}).unwrap();
        assert_eq!(again[0].row, results[0].row);
    }

    #[test]
    fn single_segment_sweep_equals_plain_encoder() {
        let plain = small_cell(SchemeConfig::soft_ppl(0.3), EncoderMode::Stateless);
        let one = small_cell(
            SchemeConfig::soft_ppl(0.3),
            EncoderMode::Allocation { segments: 1 },
        );
        let results = run_sweep(&small_sweep(vec![plain, one]), |_| {}).unwrap();
        assert_eq!(results[0].records.len(), 6);
        for (a, b) in results[0].records.iter().zip(results[1].records.iter()) {
            assert_eq!(a.completion, b.completion);
        }
        assert_eq!(results[0].outcomes, results[1].outcomes);
    }

    #[test]
    fn failing_cell_does_not_stop_sweep() {
        let bad = small_cell(
            SchemeConfig::RedGreen { delta: -1.0 },
            EncoderMode::Stateless,
        );
        let good = small_cell(
            SchemeConfig::RedGreen { delta: 1.0 },
            EncoderMode::Stateless,
        );
        let mut seen = 0;
        let results = run_sweep(&small_sweep(vec![bad, good]), |_| seen += 1).unwrap();
        assert_eq!(seen, 2);
        assert!(results[0].row.error.is_some());
        assert_eq!(results[1].row.n_samples, 6);
    }

    #[test]
    fn zero_fraction_attack_is_a_no_op() {
        use crate::attacks::AttackKind;
        let base = small_cell(
            SchemeConfig::RedGreen { delta: 2.0 },
            EncoderMode::Stateless,
        );
        let attacked = base
            .clone()
            .with_attack(Some(AttackConfig::new(AttackKind::Delete, 0.0, 1).unwrap()));
        let results = run_sweep(&small_sweep(vec![base, attacked]), |_| {}).unwrap();
        assert_eq!(results[0].outcomes, results[1].outcomes);
        assert_eq!(results[0].row.bit_accuracy, results[1].row.bit_accuracy);
    }

    #[test]
    fn metric_csv_has_schema_line_and_header() {
        let cell = small_cell(SchemeConfig::Unwatermarked, EncoderMode::Stateless);
        let results = run_sweep(&small_sweep(vec![cell]), |_| {}).unwrap();
        let mut w = MetricWriter::new(Vec::new()).unwrap();
        w.write(&results[0].row).unwrap();
        let text = String::from_utf8(w.into_inner().unwrap()).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(CSV_SCHEMA_LINE));
        assert_eq!(lines.next().unwrap(), METRIC_COLUMNS.join(","));
        let fields: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(fields.len(), METRIC_COLUMNS.len());
        assert_eq!(results[0].row.n_null, 6);
    }
}
