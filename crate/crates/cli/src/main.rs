//! `metaite`: generate benchmark data, train, estimate, evaluate and sweep.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::SweepMode;
use crate::config::{Overrides, RunConfig};
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "metaite", version, about = "Meta-learned treatment effect estimation for imbalanced treatments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Top-level seed; every random stream derives from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for outputs and the manifest.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Worker threads for sweeps.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset and its train/test split as CSV.
    GenData(Common),
    /// Meta-train and write a checkpoint and trace.
    Train(Common),
    /// Predict every potential outcome of the test split from a checkpoint.
    Estimate(Common),
    /// Score methods against the true potential outcomes.
    Evaluate(Common),
    /// Robustness or ablation sweep; resumes from cached cells.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "robustness")]
        mode: SweepMode,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (common, action): (&Common, fn(&RunConfig) -> Result<manifest::RunManifest, CliError>) = match &cli.command {
        Command::GenData(c) => (c, commands::gen_data),
        Command::Train(c) => (c, commands::train_cmd),
        Command::Estimate(c) => (c, commands::estimate),
        Command::Evaluate(c) => (c, commands::evaluate),
        Command::Sweep { common, mode } => {
            let cfg = load(common)?;
            commands::sweep(&cfg, *mode)?;
            return Ok(());
        }
    };
    let cfg = load(common)?;
    action(&cfg)?;
    Ok(())
}

fn load(c: &Common) -> Result<RunConfig, CliError> {
    let overrides = Overrides {
        seed: c.seed,
        out_dir: c.out_dir.clone(),
        jobs: c.jobs,
    };
    RunConfig::load(c.config.as_deref(), std::env::vars(), &overrides)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("METAITE_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
