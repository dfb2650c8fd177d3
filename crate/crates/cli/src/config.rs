//! Run configuration: a strict JSON document plus command-line overrides.

use std::fmt;
use std::path::Path;

use binomark::decoder::DEFAULT_MC_SAMPLES;
use binomark::encoder::EncoderMode;
use binomark::eval::SweepCell;
use binomark::lm::{check_combination, LmSpec, SamplerConfig};
use binomark::{Message, SchemeConfig, WatermarkKey};
use serde::Deserialize;

/// Failure classes, mapped to exit codes 2 and 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self::Usage(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Self::Runtime(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(msg) | Self::Runtime(msg) => f.write_str(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Runtime(format!("i/o error: {e}"))
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Experiment grid for `eval` without an input corpus.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub cells: Vec<SweepCell>,
    pub runs: usize,
    #[serde(default)]
    pub perplexity: bool,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// 64 hex characters, or a path to a file holding them.
    pub key: Option<String>,
    pub context_window: usize,
    pub m: Option<usize>,
    /// Fixed payload as a bit string; random per record when absent.
    pub message: Option<String>,
    pub scheme: Option<SchemeConfig>,
    pub encoder: EncoderMode,
    pub sampler: SamplerConfig,
    pub lm: LmSpec,
    pub n_tokens: usize,
    pub seed: u64,
    pub mc_samples: usize,
    pub sweep: Option<SweepSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            key: None,
            context_window: WatermarkKey::DEFAULT_CONTEXT_WINDOW,
            m: None,
            message: None,
            scheme: None,
            encoder: EncoderMode::Stateless,
            sampler: SamplerConfig::default(),
            lm: LmSpec::default(),
            n_tokens: 200,
            seed: 0,
            mc_samples: DEFAULT_MC_SAMPLES,
            sweep: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::usage(format!("invalid config {}: {e}", path.display())))
    }

    /// Resolves the key without ever echoing its value.
    pub fn key(&self) -> CliResult<WatermarkKey> {
        let spec = self
            .key
            .as_deref()
            .ok_or_else(|| CliError::usage("missing required field `key` (config or --key)"))?;
        let is_hex = spec.len() == 64 && spec.bytes().all(|b| b.is_ascii_hexdigit());
        let hex = if is_hex {
            spec.to_string()
        } else {
            std::fs::read_to_string(spec).map_err(|_| {
                CliError::usage("field `key` is neither 64 hex characters nor a readable key file")
            })?
        };
        WatermarkKey::from_hex(&hex, self.context_window)
            .map_err(|_| CliError::usage("field `key` must hold exactly 64 hex characters"))
    }

    pub fn m(&self) -> CliResult<usize> {
        let m = self
            .m
            .or_else(|| self.message.as_ref().map(|s| s.trim().len()))
            .ok_or_else(|| CliError::usage("missing required field `m` (config or --m)"))?;
        if m == 0 {
            return Err(CliError::usage("field `m` must be >= 1"));
        }
        Ok(m)
    }

    pub fn fixed_message(&self) -> CliResult<Option<Message>> {
        let Some(bits) = &self.message else {
            return Ok(None);
        };
        let message = Message::from_bit_str(bits.trim())
            .map_err(|e| CliError::usage(format!("field `message`: {e}")))?;
        if message.len() != self.m()? {
            return Err(CliError::usage("field `message` length differs from `m`"));
        }
        Ok(Some(message))
    }

    pub fn scheme(&self) -> CliResult<&SchemeConfig> {
        self.scheme
            .as_ref()
            .ok_or_else(|| CliError::usage("missing required field `scheme`"))
    }

    /// Checks everything `generate` depends on.
    pub fn validate_generation(&self) -> CliResult<()> {
        self.key()?;
        let m = self.m()?;
        self.fixed_message()?;
        check_combination(self.scheme()?, &self.encoder, m)
            .map_err(|e| CliError::usage(e.to_string()))?;
        self.sampler
            .validate()
            .map_err(|e| CliError::usage(e.to_string()))?;
        self.lm
            .build()
            .map_err(|e| CliError::usage(e.to_string()))?;
        if self.n_tokens == 0 {
            return Err(CliError::usage("field `n_tokens` must be >= 1"));
        }
        self.validate_mc()
    }

    pub fn validate_mc(&self) -> CliResult<()> {
        if self.mc_samples < binomark::decoder::MIN_MC_SAMPLES {
            return Err(CliError::usage(format!(
                "field `mc_samples` must be >= {}",
                binomark::decoder::MIN_MC_SAMPLES
            )));
        }
        Ok(())
    }
}
