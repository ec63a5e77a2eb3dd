//! `cbff`: synthetic data, dataset preparation, training, ablation,
//! evaluation and gradient checks for the change-detection network.
//!
//! Exit status: 0 success, 2 usage error, 3 numeric failure (non-finite
//! loss or gradient, failed gradient check), 4 corrupt artifact, 1 anything
//! else.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use cbff_core::CoreError;
use cbff_data::{DataError, Split};
use cbff_model::ModelError;
use cbff_train::TrainError;
use clap::{Parser, Subcommand, ValueEnum};

use crate::config::{ConfigArgs, UsageError};

#[derive(Parser, Debug)]
#[command(name = "cbff", version, about = "Semi-supervised bitemporal change detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Semi,
    SupOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic bitemporal corpus.
    Synth {
        /// Total pairs, including validation and test pairs.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Pairs reserved for validation.
        #[arg(long, default_value_t = 0)]
        val: usize,
        /// Pairs reserved for testing.
        #[arg(long, default_value_t = 0)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        workers: usize,
    },
    /// Tile raw pairs into a dataset and draw a labeled/unlabeled partition.
    Prepare {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 256)]
        tile: usize,
        /// Fraction of training tiles that keep their labels.
        #[arg(long, default_value_t = 0.05)]
        ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one model.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        ratio: f64,
        /// Partition file to use instead of drawing one from the ratio.
        #[arg(long)]
        partition: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "semi")]
        mode: ModeArg,
        /// Save a checkpoint every this many epochs (0: only best and last).
        #[arg(long, default_value_t = 0)]
        checkpoint_every: usize,
        /// Augmentation threads; results do not depend on it.
        #[arg(long, default_value_t = 0)]
        workers: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the four decoder ablation rows on shared partitions.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.05")]
        ratios: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        workers: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score a checkpoint on one split of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Without `--config`, the architecture is read from the
        /// `config.json` of the run directory holding the checkpoint.
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Compare analytic and finite-difference gradients of the toy network
    /// in 64-bit precision.
    Gradcheck {
        #[arg(long, default_value_t = 4)]
        samples: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
        /// Corrupt a backward pass to confirm the check notices.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

fn is_config(e: &TrainError) -> bool {
    matches!(
        e,
        TrainError::Config(_) | TrainError::Core(CoreError::Config(_)) | TrainError::Data(DataError::Config(_))
    )
}

/// Process exit status for an error.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if cause.is::<commands::GradcheckFailed>() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            if e.is_numeric() {
                return 3;
            }
            if e.is_corrupt_artifact() {
                return 4;
            }
            if is_config(e) {
                return 2;
            }
        }
        if let Some(ModelError::Checkpoint(_)) = cause.downcast_ref::<ModelError>() {
            return 4;
        }
        if let Some(DataError::Config(_)) = cause.downcast_ref::<DataError>() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
