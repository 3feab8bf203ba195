//! `dctrain`: dataset generation, training, beta sweeps, ablations and
//! reports from JSON experiment configs.
//!
//! Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 divergence.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

mod commands;
mod config;

use commands::Common;
use config::ExperimentConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("diverged: {0}")]
    Diverged(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Diverged(_) => 4,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "dctrain", version, about = "Derivative-constrained neural network training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Output directory; overrides the config's `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Concurrent training jobs for sweeps and ablations.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

impl From<&CommonArgs> for Common {
    fn from(a: &CommonArgs) -> Self {
        Common {
            out: a.out.clone(),
            seed: a.seed,
            jobs: a.jobs,
            force: a.force,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a dataset and its rescaling info.
    Gen(RunArgs),
    /// Train one model.
    Train(RunArgs),
    /// Train once per force weight beta with alpha = 1.
    Sweep(RunArgs),
    /// Train every (variant, seed) pair and compare.
    Ablate(RunArgs),
    /// Aggregate run summaries.
    Report {
        /// Run directories, or directories holding run directories.
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let with_config = |args: &RunArgs| -> Result<(ExperimentConfig, Common), CliError> {
        Ok((ExperimentConfig::load(&args.config)?, Common::from(&args.common)))
    };
    match &cli.command {
        Command::Gen(a) => {
            let (cfg, common) = with_config(a)?;
            commands::gen(&cfg, &common)
        }
        Command::Train(a) => {
            let (cfg, common) = with_config(a)?;
            commands::train_cmd(&cfg, &common)
        }
        Command::Sweep(a) => {
            let (cfg, common) = with_config(a)?;
            commands::sweep_cmd(&cfg, &common)
        }
        Command::Ablate(a) => {
            let (cfg, common) = with_config(a)?;
            commands::ablate_cmd(&cfg, &common)
        }
        Command::Report { dirs, common } => commands::report_cmd(dirs, &Common::from(common)),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dctrain: {e}");
            ExitCode::from(e.code())
        }
    }
}
