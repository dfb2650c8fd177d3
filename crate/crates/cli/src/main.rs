//! `binomark` command-line tool.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use binomark::attacks::AttackKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use commands::{NullSource, Statistic};
use config::{CliError, CliResult, RunConfig};

#[derive(Parser, Debug)]
#[command(
    name = "binomark",
    version,
    about = "Multibit text watermarking with binomial encoding"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Watermark key: 64 hex characters or a file containing them.
    #[arg(long, global = true, value_name = "HEX|FILE")]
    key: Option<String>,
    /// Master seed; overrides the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all available cores).
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    /// Output file (default: stdout).
    #[arg(long, short, global = true, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate watermarked texts as JSON lines.
    Generate {
        /// Number of records.
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Message length in bits.
        #[arg(long)]
        m: Option<usize>,
        /// Tokens per text.
        #[arg(long)]
        n_tokens: Option<usize>,
        /// Fixed payload as a bit string, e.g. 1011.
        #[arg(long)]
        message: Option<String>,
    },
    /// Decode messages and p-values from records or raw token lines.
    Decode {
        /// JSON-lines records, or one whitespace-separated token sequence per line
        /// (`-` for stdin).
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        /// Message length for raw token lines.
        #[arg(long)]
        m: Option<usize>,
    },
    /// Zero-bit detection view of `decode`.
    Detect {
        /// Same formats as `decode` (`-` for stdin).
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        #[arg(long)]
        m: Option<usize>,
        /// Significance level for the `detected` flag.
        #[arg(long, default_value_t = 0.01)]
        alpha: f64,
    },
    /// Apply a token-level edit attack to generation records.
    Attack {
        /// Generation records (`-` for stdin).
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        #[arg(long, value_enum)]
        kind: AttackArg,
        /// Fraction of tokens to edit, in [0, 1].
        #[arg(long)]
        fraction: f64,
    },
    /// Metrics CSV for a record corpus, or for the config's `sweep` grid.
    Eval {
        /// Records to evaluate; without it the config's `sweep` is run.
        #[arg(long, value_name = "FILE")]
        input: Option<PathBuf>,
    },
    /// Empirical false-positive rate against nominal levels on null texts.
    Calibrate {
        /// Number of null texts (at least 100).
        #[arg(long, default_value_t = 1000)]
        n: usize,
        /// Nominal levels.
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "0.001,0.005,0.01,0.05,0.1"
        )]
        alphas: Vec<f64>,
        #[arg(long, value_enum, default_value_t = Statistic::PerBit)]
        statistic: Statistic,
        #[arg(long, value_enum, default_value_t = NullSource::Lm)]
        null: NullSource,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        n_tokens: Option<usize>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AttackArg {
    Delete,
    Substitute,
}

impl From<AttackArg> for AttackKind {
    fn from(a: AttackArg) -> Self {
        match a {
            AttackArg::Delete => AttackKind::Delete,
            AttackArg::Substitute => AttackKind::Substitute,
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(jobs) = cli.common.jobs {
        if jobs == 0 {
            return Err(CliError::usage("--jobs must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::runtime(e.to_string()))?;
    }
    let mut cfg = RunConfig::load(cli.common.config.as_deref())?;
    if let Some(key) = cli.common.key {
        cfg.key = Some(key);
    }
    if let Some(seed) = cli.common.seed {
        cfg.seed = seed;
    }
    let mut out = commands::open_output(cli.common.out.as_deref())?;
    match cli.command {
        Command::Generate {
            count,
            m,
            n_tokens,
            message,
        } => {
            cfg.m = m.or(cfg.m);
            cfg.n_tokens = n_tokens.unwrap_or(cfg.n_tokens);
            cfg.message = message.or(cfg.message);
            commands::generate_cmd(&cfg, count, &mut out)?;
        }
        Command::Decode { input, m } => {
            cfg.m = m.or(cfg.m);
            commands::decode_cmd(&cfg, &input, None, &mut out)?;
        }
        Command::Detect { input, m, alpha } => {
            cfg.m = m.or(cfg.m);
            commands::decode_cmd(&cfg, &input, Some(alpha), &mut out)?;
        }
        Command::Attack {
            input,
            kind,
            fraction,
        } => {
            commands::attack_cmd(&cfg, &input, kind.into(), fraction, &mut out)?;
        }
        Command::Eval { input } => commands::eval_cmd(&cfg, input.as_deref(), &mut out)?,
        Command::Calibrate {
            n,
            alphas,
            statistic,
            null,
            m,
            n_tokens,
        } => {
            cfg.m = m.or(cfg.m);
            cfg.n_tokens = n_tokens.unwrap_or(cfg.n_tokens);
            commands::calibrate_cmd(&cfg, n, &alphas, statistic, null, &mut out)?;
        }
    }
    out.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("binomark: error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn unknown_flags_are_rejected() {
        let err = Cli::try_parse_from(["binomark", "generate", "--colour"]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
