//! Command-line driver: `simulate`, `train`, `predict`, `evaluate` and
//! `benchmark`, each configured by a TOML file.

mod commands;
mod config;
mod files;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::Context;
use crate::config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<batfled::Error> for CliError {
    fn from(e: batfled::Error) -> Self {
        use batfled::Error as E;
        let msg = e.to_string();
        match e {
            E::Shape(_) | E::Config(_) => CliError::Validation(msg),
            E::Solver { .. } | E::NonFinite { .. } => CliError::Numerical(msg),
            E::Checkpoint(_) | E::Version { .. } | E::Io(_) => CliError::Io(msg),
        }
    }
}

#[derive(Parser)]
#[command(name = "batfled", version, about = "Bayesian tensor factorization linked to external data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Where outputs are written (created if missing).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with its truth and split files.
    Simulate(Common),
    /// Fit a model and write a checkpoint and trace.
    Train(Common),
    /// Predict from a checkpoint for known or new examples.
    Predict(Common),
    /// Score the configured model on one split or a set of folds.
    Evaluate(Common),
    /// Run replicates of the simulated benchmark.
    Benchmark(Common),
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (common, f): (&Common, fn(&Context) -> Result<(), CliError>) = match &cli.command {
        Command::Simulate(c) => (c, commands::simulate),
        Command::Train(c) => (c, commands::train_cmd),
        Command::Predict(c) => (c, commands::predict),
        Command::Evaluate(c) => (c, commands::evaluate),
        Command::Benchmark(c) => (c, commands::benchmark),
    };
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(t) = common.threads.or(cfg.threads) {
        if t == 0 {
            return Err(CliError::Validation("threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Validation(format!("thread pool: {e}")))?;
    }
    let out_dir = match (&common.out_dir, &cfg.out_dir) {
        (Some(d), _) => d.clone(),
        (None, Some(d)) => cfg.resolve(d),
        (None, None) => PathBuf::from("."),
    };
    commands::ensure_dir(&out_dir)?;
    f(&Context { cfg, out_dir })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
