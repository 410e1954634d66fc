//! `domino` command line: verify, simulate, sweep, model-size.
//!
//! Exit status: 0 on success, 1 when a verification check fails, 2 on a
//! configuration or I/O error.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use domino_core::config::{ConfigError, ExperimentConfig};
use domino_core::experiment::{self, write_records, ExperimentError, OutputFormat};
use domino_core::schedule::Mode;

#[derive(Parser)]
#[command(name = "domino", version, about = "Tensor-parallel overlap lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "csv")]
    format: OutputFormat,
    /// Comma-separated subset of modes, e.g. SyncBaseline,DominoRow.
    #[arg(long, value_delimiter = ',')]
    modes: Option<Vec<Mode>>,
}

#[derive(Subcommand)]
enum Command {
    /// Check sliced execution against the single-device reference.
    Verify(Common),
    /// Simulated iteration time per mode.
    Simulate(Common),
    /// Rank partition plans per configuration point.
    Sweep(Common),
    /// Parameter count of a GPT-style model.
    ModelSize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long, default_value_t = 50257)]
        vocab: usize,
        #[arg(long, default_value_t = 2048)]
        seq_len: usize,
    },
}

fn load(c: &Common) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::from_toml("")?,
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(m) = &c.modes {
        cfg.modes = m.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn output(c: &Common) -> Result<Box<dyn Write>, ExperimentError> {
    Ok(match &c.out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn run(cli: Cli) -> Result<bool, ExperimentError> {
    match cli.command {
        Command::Verify(c) => {
            let cfg = load(&c)?;
            let rows = experiment::verify_records(&cfg)?;
            write_records(&rows, c.format, output(&c)?)?;
            let failed: Vec<_> = rows.iter().filter(|r| !r.pass).collect();
            for r in &failed {
                eprintln!(
                    "FAIL {} n={} p1={} p2={} b={} s={} h={}: fwd {:.2e} grad {:.2e} fd {:.2e} volume {} audits [{}]",
                    r.mode, r.n, r.p1, r.p2, r.batch, r.seq, r.hidden, r.max_abs_forward_diff,
                    r.max_abs_grad_diff, r.fd_rel_err, r.volume_match, r.failed_audits
                );
            }
            eprintln!("{} of {} points passed", rows.len() - failed.len(), rows.len());
            Ok(failed.is_empty())
        }
        Command::Simulate(c) => {
            let cfg = load(&c)?;
            write_records(&experiment::simulate_records(&cfg)?, c.format, output(&c)?)?;
            Ok(true)
        }
        Command::Sweep(c) => {
            let cfg = load(&c)?;
            write_records(&experiment::sweep_records(&cfg)?, c.format, output(&c)?)?;
            Ok(true)
        }
        Command::ModelSize { common, hidden, layers, vocab, seq_len } => {
            let rec = match (hidden, layers) {
                (Some(h), Some(l)) => experiment::model_size_record("", h, l, vocab, seq_len)?,
                (None, None) => load(&common)?.model()?.size_record()?,
                _ => return Err(ConfigError::Invalid("--hidden and --layers go together".into()).into()),
            };
            write_records(&[rec], common.format, output(&common)?)?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
