//! `urkle`: pretrain encoders, fit probes, attack and audit them, and
//! summarize finished runs.

mod commands;
mod config;
mod error;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "urkle", version, about = "Robust probabilistic representation learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// Run configuration (flat `key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to `out_dir` from the config, then `urkle_out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train an encoder (and any heads its method needs).
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Train a classifier on a frozen encoder.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Clean and adversarial accuracy for every configured epsilon.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Checkpoint holding the classifier; defaults to `--checkpoint`.
        #[arg(long)]
        probe: Option<PathBuf>,
    },
    /// Adversarial loss against its KL-based upper bound.
    Audit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        probe: Option<PathBuf>,
    },
    /// Summary table and plots for the runs under the output directory.
    Report {
        /// Only consulted for its `out_dir` when `--out` is absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn setup(common: &Common) -> Result<(RunConfig, PathBuf), CliError> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let out = common
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("urkle_out"));
    Ok((cfg, out))
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var("URKLE_THREADS") else {
        return Ok(());
    };
    let threads: usize = value.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| CliError::Config {
        line: 0,
        message: format!("URKLE_THREADS must be a positive integer, got `{value}`"),
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Config {
            line: 0,
            message: e.to_string(),
        })
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Pretrain { common } => {
            let (cfg, out) = setup(&common)?;
            let path = commands::pretrain(&cfg, &out)?;
            println!("wrote {}", path.display());
        }
        Command::Probe { common, checkpoint } => {
            let (cfg, out) = setup(&common)?;
            let path = commands::probe(&cfg, &checkpoint, &out)?;
            println!("wrote {}", path.display());
        }
        Command::Attack {
            common,
            checkpoint,
            probe,
        } => {
            let (cfg, out) = setup(&common)?;
            commands::attack(&cfg, &checkpoint, probe.as_deref(), &out)?;
        }
        Command::Audit {
            common,
            checkpoint,
            probe,
        } => {
            let (cfg, out) = setup(&common)?;
            commands::audit(&cfg, &checkpoint, probe.as_deref(), &out)?;
        }
        Command::Report { config, out } => {
            let from_config = match &config {
                Some(path) => RunConfig::load(path)?.out_dir,
                None => None,
            };
            let dir = out.or(from_config).unwrap_or_else(|| PathBuf::from("urkle_out"));
            print!("{}", report::write_report(&dir)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
