//! Subcommand implementations.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use binomark::attacks::{AttackConfig, AttackKind};
use binomark::decoder::{DecoderConfig, DetectionReport, Detector, REPORT_SCHEMA_VERSION};
use binomark::eval::{
    calibration_curve, detector_for, evaluate_records, fingerprint_of, record_message, record_seed,
    run_sweep, write_calibration_csv, MetricRow, MetricWriter, RecordOutcome, RowInfo, SeedPurpose,
    SweepCell, SweepConfig,
};
use binomark::lm::{
    generate, is_header_line, read_jsonl, write_jsonl, write_jsonl_header, GenerationRecord,
    GenerationRequest, LmSpec, SamplerConfig, ShapedLm,
};
use binomark::{Message, SchemeConfig, Token};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{CliError, CliResult, RunConfig};

pub fn open_output(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| {
            CliError::runtime(format!("cannot create {}: {e}", p.display()))
        })?)),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    })
}

/// `-` reads standard input.
fn open_input(path: &Path) -> CliResult<Box<dyn BufRead>> {
    if path == Path::new("-") {
        return Ok(Box::new(BufReader::new(std::io::stdin().lock())));
    }
    File::open(path)
        .map(|f| Box::new(BufReader::new(f)) as Box<dyn BufRead>)
        .map_err(|e| CliError::runtime(format!("cannot open {}: {e}", path.display())))
}

/// JSON-lines writer that emits its header before the first data line, so
/// an empty result stays an empty file.
struct JsonlOut<'a> {
    out: &'a mut dyn Write,
    header: &'static str,
    started: bool,
}

impl<'a> JsonlOut<'a> {
    fn new(out: &'a mut dyn Write, header: &'static str) -> Self {
        Self {
            out,
            header,
            started: false,
        }
    }

    fn item<T: Serialize>(&mut self, item: &T) -> CliResult<()> {
        if !self.started {
            write_jsonl_header(&mut self.out, self.header)?;
            self.started = true;
        }
        write_jsonl(&mut self.out, item)?;
        Ok(())
    }
}

fn decoder_seed(cfg: &RunConfig) -> u64 {
    record_seed(cfg.seed, u64::MAX, SeedPurpose::Decoder)
}

fn read_records(path: &Path) -> CliResult<Vec<(usize, Result<GenerationRecord, String>)>> {
    Ok(read_jsonl(open_input(path)?)?)
}

pub fn generate_cmd(cfg: &RunConfig, count: usize, out: &mut dyn Write) -> CliResult<()> {
    cfg.validate_generation()?;
    let key = cfg.key()?;
    let m = cfg.m()?;
    let fixed = cfg.fixed_message()?;
    let scheme = cfg.scheme()?;
    let lm = ShapedLm::new(
        cfg.lm.build().map_err(|e| CliError::usage(e.to_string()))?,
        &cfg.sampler,
    );
    let records: Vec<GenerationRecord> = (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let message = match &fixed {
                Some(msg) => msg.clone(),
                None => record_message(cfg.seed, i, m)?,
            };
            let mut record = generate(&GenerationRequest {
                lm: &lm,
                key: &key,
                message: &message,
                scheme,
                encoder: &cfg.encoder,
                sampler: &cfg.sampler,
                n_tokens: cfg.n_tokens,
                seed: record_seed(cfg.seed, i, SeedPurpose::Generation),
                trace: false,
            })?
            .record;
            record.index = i;
            Ok(record)
        })
        .collect::<binomark::Result<_>>()
        .map_err(|e| CliError::runtime(e.to_string()))?;
    let mut jsonl = JsonlOut::new(out, "generation records");
    for record in &records {
        jsonl.item(record)?;
    }
    eprintln!("binomark: generated {} record(s)", records.len());
    Ok(())
}

/// One line of a decode input: a generation record or bare token ids.
enum Input {
    Record(Box<GenerationRecord>),
    Tokens(Vec<Token>),
}

fn parse_tokens(line: &str) -> Result<Vec<Token>, String> {
    line.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<Token>()
                .map_err(|_| format!("not a token id: {s:?}"))
        })
        .collect()
}

fn read_inputs(path: &Path) -> CliResult<Vec<(usize, Result<Input, String>)>> {
    let mut inputs = Vec::new();
    for (i, line) in open_input(path)?.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || is_header_line(trimmed) {
            continue;
        }
        let parsed = if trimmed.starts_with('{') {
            serde_json::from_str::<GenerationRecord>(trimmed)
                .map(|r| Input::Record(Box::new(r)))
                .map_err(|e| e.to_string())
        } else {
            parse_tokens(trimmed).map(Input::Tokens)
        };
        inputs.push((i + 1, parsed));
    }
    Ok(inputs)
}

/// Decoder settings for bare token lines, taken from the run config.
fn raw_decoder_config(cfg: &RunConfig) -> CliResult<DecoderConfig> {
    let m = cfg.m()?;
    let vocab = binomark::Vocabulary::new(cfg.lm.vocab_size())
        .map_err(|e| CliError::usage(e.to_string()))?;
    let mut dcfg = DecoderConfig::new(m, vocab);
    dcfg.allocation = cfg
        .encoder
        .allocation(m)
        .map_err(|e| CliError::usage(e.to_string()))?;
    if let Some(SchemeConfig::Synthid { n_layers, .. }) = cfg.scheme {
        dcfg.synthid_layers = Some(n_layers);
    }
    dcfg.mc_samples = cfg.mc_samples;
    dcfg.mc_seed = decoder_seed(cfg);
    dcfg.tie_seed = decoder_seed(cfg);
    Ok(dcfg)
}

/// Builds one detector per distinct decoder configuration.
struct Detectors {
    raw: Option<Detector>,
    by_record: HashMap<String, Detector>,
}

impl Detectors {
    fn build(cfg: &RunConfig, inputs: &[(usize, Result<Input, String>)]) -> CliResult<Self> {
        let key = cfg.key()?;
        cfg.validate_mc()?;
        let mut raw = None;
        let mut by_record = HashMap::new();
        for (_, input) in inputs {
            match input {
                Ok(Input::Tokens(_)) if raw.is_none() => {
                    let dcfg = raw_decoder_config(cfg)?;
                    raw = Some(
                        Detector::new(key.clone(), dcfg)
                            .map_err(|e| CliError::usage(e.to_string()))?,
                    );
                }
                Ok(Input::Record(r)) => {
                    let id = record_detector_id(r);
                    if let std::collections::hash_map::Entry::Vacant(e) = by_record.entry(id) {
                        // a record with unusable settings fails on its own line
                        if let Ok(d) = detector_for(r, &key, cfg.mc_samples, decoder_seed(cfg)) {
                            e.insert(d);
                        }
                    }
                }
                _ => {}
            }
        }
        Ok(Self { raw, by_record })
    }

    fn detect(&self, input: &Input) -> Result<DetectionReport, String> {
        let (detector, tokens) = match input {
            Input::Tokens(tokens) => (self.raw.as_ref(), tokens),
            Input::Record(r) => (self.by_record.get(&record_detector_id(r)), &r.completion),
        };
        let detector = detector.ok_or("record carries an unusable decoder configuration")?;
        detector.detect(tokens).map_err(|e| e.to_string())
    }
}

fn record_detector_id(r: &GenerationRecord) -> String {
    match r.decoder_config() {
        Ok(c) => format!("{c:?}/{}", r.context_window),
        Err(e) => format!("error:{e}"),
    }
}

#[derive(Serialize)]
struct DecodeLine {
    schema_version: u32,
    line: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    index: Option<u64>,
    /// The payload the record claims to carry, for comparison.
    #[serde(skip_serializing_if = "Option::is_none")]
    embedded: Option<Message>,
    #[serde(skip_serializing_if = "Option::is_none")]
    report: Option<DetectionReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

#[derive(Serialize)]
struct DetectLine {
    schema_version: u32,
    line: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    index: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    zero_bit_statistic: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    zero_bit_pvalue: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    effective_length: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    detected: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

/// Shared body of `decode` and `detect`; `alpha` selects the zero-bit view.
pub fn decode_cmd(
    cfg: &RunConfig,
    input: &Path,
    alpha: Option<f64>,
    out: &mut dyn Write,
) -> CliResult<()> {
    if let Some(a) = alpha {
        if !(a > 0.0 && a < 1.0) {
            return Err(CliError::usage(format!(
                "--alpha must lie in (0, 1), got {a}"
            )));
        }
    }
    let inputs = read_inputs(input)?;
    if inputs.is_empty() {
        return Ok(());
    }
    let detectors = Detectors::build(cfg, &inputs)?;
    let results: Vec<(
        usize,
        Option<u64>,
        Option<Message>,
        Result<DetectionReport, String>,
    )> = inputs
        .par_iter()
        .map(|(line, parsed)| match parsed {
            Err(e) => (*line, None, None, Err(e.clone())),
            Ok(input) => {
                let (index, embedded) = match input {
                    Input::Record(r) => (Some(r.index), Some(r.message.clone())),
                    Input::Tokens(_) => (None, None),
                };
                (*line, index, embedded, detectors.detect(input))
            }
        })
        .collect();
    let failed = results.iter().filter(|r| r.3.is_err()).count();
    let mut jsonl = JsonlOut::new(
        out,
        if alpha.is_some() {
            "detections"
        } else {
            "decodings"
        },
    );
    for (line, index, embedded, result) in results {
        let (report, error) = match result {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(e)),
        };
        match alpha {
            None => jsonl.item(&DecodeLine {
                schema_version: REPORT_SCHEMA_VERSION,
                line,
                index,
                embedded,
                report,
                error,
            })?,
            Some(a) => jsonl.item(&DetectLine {
                schema_version: REPORT_SCHEMA_VERSION,
                line,
                index,
                zero_bit_statistic: report.as_ref().map(|r| r.zero_bit_statistic),
                zero_bit_pvalue: report.as_ref().map(|r| r.zero_bit_pvalue),
                effective_length: report.as_ref().map(|r| r.effective_length),
                detected: report.as_ref().map(|r| r.is_detected(a)),
                error,
            })?,
        }
    }
    eprintln!(
        "binomark: processed {} line(s), {failed} failed",
        inputs.len()
    );
    if failed == inputs.len() {
        return Err(CliError::runtime("every input line failed"));
    }
    Ok(())
}

pub fn attack_cmd(
    cfg: &RunConfig,
    input: &Path,
    kind: AttackKind,
    fraction: f64,
    out: &mut dyn Write,
) -> CliResult<()> {
    AttackConfig::new(kind, fraction, cfg.seed).map_err(|e| CliError::usage(e.to_string()))?;
    let mut records = Vec::new();
    for (line, parsed) in read_records(input)? {
        records.push(parsed.map_err(|e| CliError::runtime(format!("line {line}: {e}")))?);
    }
    let attacked: Vec<GenerationRecord> = records
        .par_iter()
        .map(|r| {
            let seed = record_seed(cfg.seed, r.index, SeedPurpose::Attack);
            AttackConfig::new(kind, fraction, seed)?.apply_to_record(r)
        })
        .collect::<binomark::Result<_>>()
        .map_err(|e| CliError::runtime(e.to_string()))?;
    let mut jsonl = JsonlOut::new(out, "attacked generation records");
    for r in &attacked {
        jsonl.item(r)?;
    }
    eprintln!("binomark: attacked {} record(s)", attacked.len());
    Ok(())
}

fn corpus_info(records: &[GenerationRecord]) -> RowInfo {
    let first = records
        .iter()
        .find(|r| r.scheme.is_watermarked())
        .or(records.first())
        .expect("corpus is not empty");
    let n_tokens = first
        .attack
        .as_ref()
        .map_or(first.completion.len(), |a| a.original_length);
    let attack = first.attack.as_ref();
    RowInfo {
        fingerprint: fingerprint_of(&(
            &first.scheme,
            &first.encoder,
            first.message.len(),
            n_tokens,
            attack.map(|a| (&a.kind, a.fraction)),
        )),
        scheme: first.scheme.label(),
        encoder: first.encoder.label(),
        m: first.message.len(),
        n_tokens,
        attack: attack.map_or("none".into(), |a| a.kind.clone()),
        attack_fraction: attack.map_or(0.0, |a| a.fraction),
    }
}

fn eval_corpus(cfg: &RunConfig, input: &Path, out: &mut dyn Write) -> CliResult<()> {
    let key = cfg.key()?;
    cfg.validate_mc()?;
    let mut failed = 0;
    let mut groups: Vec<(String, Vec<GenerationRecord>)> = Vec::new();
    for (_, parsed) in read_records(input)? {
        let Ok(record) = parsed else {
            failed += 1;
            continue;
        };
        let id = record_detector_id(&record);
        match groups.iter_mut().find(|(g, _)| *g == id) {
            Some((_, members)) => members.push(record),
            None => groups.push((id, vec![record])),
        }
    }
    if groups.is_empty() {
        return Err(CliError::runtime("no readable records in the corpus"));
    }
    let mut outcomes: Vec<RecordOutcome> = Vec::new();
    let mut all = Vec::new();
    for (_, records) in groups {
        match detector_for(&records[0], &key, cfg.mc_samples, decoder_seed(cfg)) {
            Ok(detector) => {
                let (o, f) = evaluate_records(&records, &detector, None);
                outcomes.extend(o);
                failed += f;
            }
            Err(_) => failed += records.len(),
        }
        all.extend(records);
    }
    let row = MetricRow::from_outcomes(corpus_info(&all), &outcomes, failed);
    let mut writer = MetricWriter::new(out)?;
    writer.write(&row)?;
    writer.into_inner()?;
    eprintln!(
        "binomark: evaluated {} record(s), {failed} failed",
        outcomes.len()
    );
    Ok(())
}

fn eval_sweep(cfg: &RunConfig, out: &mut dyn Write) -> CliResult<()> {
    let spec = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| CliError::usage("eval needs --input or a `sweep` section in the config"))?;
    if spec.cells.is_empty() || spec.runs == 0 {
        return Err(CliError::usage(
            "`sweep` needs at least one cell and runs >= 1",
        ));
    }
    cfg.validate_mc()?;
    let mut sweep = SweepConfig::new(spec.cells.clone(), spec.runs, cfg.seed, cfg.key()?);
    sweep.mc_samples = cfg.mc_samples;
    sweep.perplexity = spec.perplexity;
    let mut writer = MetricWriter::new(out)?;
    let mut io_error = None;
    let mut errors = 0;
    run_sweep(&sweep, |cell| {
        if let Some(e) = &cell.row.error {
            errors += 1;
            eprintln!("binomark: cell {} failed: {e}", cell.row.fingerprint);
        } else {
            eprintln!("binomark: cell {} done", cell.row.fingerprint);
        }
        if io_error.is_none() {
            io_error = writer.write(&cell.row).err();
        }
    })
    .map_err(|e| CliError::usage(e.to_string()))?;
    if let Some(e) = io_error {
        return Err(e.into());
    }
    writer.into_inner()?;
    if errors == spec.cells.len() {
        return Err(CliError::runtime("every sweep cell failed"));
    }
    Ok(())
}

pub fn eval_cmd(cfg: &RunConfig, input: Option<&Path>, out: &mut dyn Write) -> CliResult<()> {
    match input {
        Some(path) => eval_corpus(cfg, path, out),
        None => eval_sweep(cfg, out),
    }
}

/// Where calibration draws its unwatermarked texts from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum NullSource {
    /// Unwatermarked samples of the configured toy LM.
    Lm,
    /// Uniformly random token ids.
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Statistic {
    /// Pooled per-bit binomial p-values.
    PerBit,
    /// Zero-bit Monte-Carlo p-values.
    ZeroBit,
}

pub const MIN_CALIBRATION_TEXTS: usize = 100;

pub fn calibrate_cmd(
    cfg: &RunConfig,
    n: usize,
    alphas: &[f64],
    statistic: Statistic,
    null: NullSource,
    out: &mut dyn Write,
) -> CliResult<()> {
    if n < MIN_CALIBRATION_TEXTS {
        return Err(CliError::usage(format!(
            "calibration needs n >= {MIN_CALIBRATION_TEXTS} null texts, got {n}"
        )));
    }
    if alphas.is_empty() || alphas.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
        return Err(CliError::usage("every alpha must lie in (0, 1]"));
    }
    let mut grid = alphas.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let m = cfg.m()?;
    cfg.validate_mc()?;
    let (lm, sampler) = match null {
        NullSource::Lm => (cfg.lm.clone(), cfg.sampler.clone()),
        NullSource::Random => {
            let vocab = cfg.lm.vocab_size();
            let sampler = SamplerConfig {
                temperature: 1.0,
                top_k: vocab,
                ..cfg.sampler.clone()
            };
            (LmSpec::Uniform { vocab, seed: 0 }, sampler)
        }
    };
    let mut cell = SweepCell::new(
        SchemeConfig::Unwatermarked,
        cfg.encoder.clone(),
        m,
        cfg.n_tokens,
    );
    cell.lm = lm;
    cell.sampler = sampler;
    let mut sweep = SweepConfig::new(vec![cell], n, cfg.seed, cfg.key()?);
    sweep.mc_samples = cfg.mc_samples;
    let result = run_sweep(&sweep, |_| {})
        .map_err(|e| CliError::usage(e.to_string()))?
        .pop()
        .expect("one cell");
    if let Some(e) = &result.row.error {
        return Err(CliError::usage(e.clone()));
    }
    let pvalues: Vec<f64> = match statistic {
        Statistic::PerBit => result
            .outcomes
            .iter()
            .flat_map(|o| o.per_bit_pvalues.clone())
            .collect(),
        Statistic::ZeroBit => result.outcomes.iter().map(|o| o.zero_bit_pvalue).collect(),
    };
    let points =
        calibration_curve(&pvalues, &grid).map_err(|e| CliError::runtime(e.to_string()))?;
    write_calibration_csv(out, &points)?;
    eprintln!(
        "binomark: calibrated on {} null text(s)",
        result.outcomes.len()
    );
    Ok(())
}
