//! Experiment harness: argument parsing, configuration and the commands
//! behind the `r2dl` binary.

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub mod commands;
pub mod config;

pub use config::ExperimentConfig;

/// A configuration or input problem detected before any computation.
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

pub const EXIT_INVALID: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

/// Exit status for a failed command: 2 for bad configuration or inputs,
/// 3 for failures during computation.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Invalid>() || cause.is::<serde_json::Error>() {
            return EXIT_INVALID;
        }
        if let Some(e) = cause.downcast_ref::<r2dl_core::Error>() {
            return if e.is_validation() { EXIT_INVALID } else { EXIT_RUNTIME };
        }
    }
    EXIT_RUNTIME
}

#[derive(Debug, Parser)]
#[command(name = "r2dl", version, about = "Reprogram frozen sequence classifiers with sparse dictionary codes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for checkpoints and metrics.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Default, Args)]
pub struct R2dlOverrides {
    /// Outer iterations T₁.
    #[arg(long)]
    pub outer_iterations: Option<usize>,
    /// k-SVD sweeps T₂ per projection stage.
    #[arg(long)]
    pub ksvd_iterations: Option<usize>,
    /// Residual tolerance for sparse coding.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Constant step size.
    #[arg(long)]
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the source classifier and save a frozen checkpoint.
    TrainSource {
        #[command(flatten)]
        common: Common,
    },
    /// Learn a sparse program for the target task.
    Reprogram {
        #[command(flatten)]
        common: Common,
        /// Frozen source checkpoint [default: <out>/source_model.json].
        #[arg(long)]
        source_checkpoint: Option<PathBuf>,
        #[command(flatten)]
        overrides: R2dlOverrides,
    },
    /// Evaluate a saved program on a dataset or a configured split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        program: PathBuf,
        #[arg(long)]
        source_checkpoint: PathBuf,
        /// CSV (`sequence,label`) or FASTA file; overrides `--split`.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Split of the configured target data.
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
    },
    /// Reprogramming vs training from scratch over nested training subsets.
    SweepData {
        #[command(flatten)]
        common: Common,
        /// Frozen source checkpoint; trained in-process when omitted.
        #[arg(long)]
        source_checkpoint: Option<PathBuf>,
        /// Comma-separated training sizes.
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        #[command(flatten)]
        overrides: R2dlOverrides,
    },
    /// Test accuracy and coding error across k-SVD sweep counts.
    SweepKsvd {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        source_checkpoint: Option<PathBuf>,
        /// Comma-separated k-SVD sweep counts.
        #[arg(long, value_delimiter = ',')]
        sweeps: Option<Vec<usize>>,
        #[command(flatten)]
        overrides: R2dlOverrides,
    },
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    commands::dispatch(cli.command)
}
