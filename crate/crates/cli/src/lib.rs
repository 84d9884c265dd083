//! Command-line front end for the entroshape experiments.
//!
//! Exit codes: 0 success, 1 configuration or I/O error, 2 verification
//! failure, 3 numerical divergence.

pub mod commands;
pub mod config;
pub mod manifest;

use std::path::PathBuf;

use clap::{ArgAction, Parser, Subcommand};
use entroshape::analysis::Task;
use thiserror::Error;

pub use commands::{run, Outcome};
pub use config::ExperimentConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("diverged: {0}")]
    Diverged(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 1,
            CliError::Verification(_) => 2,
            CliError::Diverged(_) => 3,
        }
    }
}

impl From<entroshape::Error> for CliError {
    fn from(err: entroshape::Error) -> Self {
        use entroshape::Error as E;
        match err {
            E::Config(msg) => CliError::Config(msg),
            E::Input(_) | E::Json(_) => CliError::Config(err.to_string()),
            E::Io { .. } | E::Csv(_) => CliError::Io(err.to_string()),
            E::GradientMismatch { .. } => CliError::Verification(err.to_string()),
            E::Diverged { .. } => CliError::Diverged(err.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "entroshape",
    version,
    about = "Trajectory-level error-entropy losses and experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// JSON experiment config; every section is optional.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Output directory (overrides `output_dir` in the config).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Run seed (overrides `seed` in the config; shifts sweep seed lists).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Fixed-order reductions; `--deterministic false` allows parallel sums.
    #[arg(
        long,
        global = true,
        default_value_t = true,
        num_args = 0..=1,
        default_missing_value = "true",
        action = ArgAction::Set
    )]
    pub deterministic: bool,

    /// Worker threads for parallel reductions and sweeps.
    #[arg(long, global = true, env = "ENTROSHAPE_THREADS")]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Compare analytic gradients with finite differences over a grid.
    GradCheck,
    /// Train a policy and write metrics, snapshots and a summary.
    Train,
    /// Paired MSE-only vs MSE + entropy runs on corrupted targets.
    NoiseBench,
    /// Two-task imbalance sweep with coupling ratios.
    Imbalance,
    /// Outlier gradient norms against distance from a tight cluster.
    Influence,
    /// Recompute a run's entropy curve from its snapshots.
    EntropyCurve {
        /// Run directory written by `train`.
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Project an error set onto its principal components.
    Pca {
        /// Run directory written by `train`.
        #[arg(long)]
        run: Option<PathBuf>,
        /// Error-set CSV to project instead of a run snapshot.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        components: Option<usize>,
        /// Keep only one task's samples (A or B; needs `--run`).
        #[arg(long, value_parser = parse_task)]
        task: Option<Task>,
    },
}

fn parse_task(s: &str) -> Result<Task, String> {
    match s {
        "A" | "a" => Ok(Task::A),
        "B" | "b" => Ok(Task::B),
        _ => Err(format!("expected A or B, got {s}")),
    }
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GradCheck => "grad-check",
            Command::Train => "train",
            Command::NoiseBench => "noise-bench",
            Command::Imbalance => "imbalance",
            Command::Influence => "influence",
            Command::EntropyCurve { .. } => "entropy-curve",
            Command::Pca { .. } => "pca",
        }
    }
}
