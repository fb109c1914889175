//! `batchless` command-line harness.
//!
//! Exit codes: 0 on success, 1 when a run or check failed after its
//! artifacts were written, 2 on usage, configuration or input errors.

mod cifar;
mod config;
mod output;
mod report;
mod spiral;
mod stats;
mod svg;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::Settings;

#[derive(Parser)]
#[command(
    name = "batchless",
    version,
    about = "Batchless normalization experiments"
)]
struct Cli {
    /// TOML config file with one section per command.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Artifact directory; overrides BATCHLESS_OUT_DIR and the config file.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Spiral classification: convergence, validation loss and fluctuation.
    Spiral(spiral::SpiralArgs),
    /// Reduced-scale CIFAR-10 training.
    Cifar(cifar::CifarArgs),
    /// Initialize batchless statistics of a checkpoint from a data sample.
    InitStats(stats::InitStatsArgs),
    /// Convert a batch-norm or plain checkpoint to batchless normalization.
    Migrate(stats::MigrateArgs),
    /// Aggregate per-run CSVs into tables and plots.
    Report(report::ReportArgs),
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(batchless::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use batchless::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(
                E::Contract(_)
                | E::NonFinite { .. }
                | E::DegenerateSigma { .. }
                | E::DegenerateParameter { .. }
                | E::DegenerateSample { .. }
                | E::InsufficientBatch { .. }
                | E::Domain { .. },
            ) => 1,
            CliError::Core(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => e.fmt(f),
        }
    }
}

impl From<batchless::Error> for CliError {
    fn from(e: batchless::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

/// A command that ran to the end; `Failed` still wrote its artifacts.
pub enum Status {
    Ok,
    Failed(String),
}

pub type CmdResult = Result<Status, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome =
        Settings::load(cli.config.as_deref(), cli.out_dir).and_then(|settings| match cli.command {
            Command::Spiral(a) => spiral::run(&settings, a),
            Command::Cifar(a) => cifar::run(&settings, a),
            Command::InitStats(a) => stats::run_init(&settings, a),
            Command::Migrate(a) => stats::run_migrate(&settings, a),
            Command::Report(a) => report::run(&settings, a),
        });
    match outcome {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Failed(msg)) => {
            eprintln!("failed: {msg}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
