//! `efcn` — command-line front end for the evidential segmentation library.
//!
//! Subcommands cover the full experiment loop: generate synthetic data,
//! train, predict, evaluate (with optional γ sweep), export calibration
//! data, print utility tables, and finite-difference-check the gradients.
//! Every run is deterministic given identical inputs and seed.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use efcn::Error;

use crate::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "efcn",
    about = "Evidential segmentation: train, evaluate and inspect models",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset described by the config file.
    Synth {
        /// Run configuration (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Output dataset directory (defaults to paths.dataset).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model and write a checkpoint plus a loss/utility history CSV.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory (defaults to paths.dataset).
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Checkpoint output path (defaults to paths.checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// History CSV output path (defaults to paths.history, else skipped).
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Write per-image assigned-set masks, BetP tensors and PPM overlays.
    Predict {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Which split to predict: train, val or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Output directory (defaults to paths.out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute pixel utility, utility IoU and calibration error on a split.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Re-run act selection and metrics over γ = 0.50, 0.55, …, 1.00
        /// from one set of stored probabilities.
        #[arg(long)]
        gamma_sweep: bool,
        /// Output CSV path (defaults to paths.out_dir/metrics.csv, or
        /// gamma_sweep.csv when sweeping).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write reliability-diagram data (per-bin confidence vs. utility).
    Calibrate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Output CSV path (defaults to paths.out_dir/reliability.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print an OWA-extended utility table (or its soft-label form) as CSV.
    Owa {
        /// Tolerance-to-imprecision parameter in [0.5, 1].
        #[arg(long, default_value_t = 0.8)]
        gamma: f64,
        /// Number of classes.
        #[arg(long, default_value_t = 3)]
        m: usize,
        /// Act categories: comma-separated singletons, pairs, triples, omega.
        #[arg(long, default_value = "singletons,pairs,omega")]
        acts: String,
        /// Switch to the soft-label matrix with these label categories
        /// as columns (same syntax as --acts).
        #[arg(long)]
        soft_labels: Option<String>,
    },
    /// Compare analytic gradients against central finite differences on a
    /// small synthetic sample.
    Gradcheck {
        /// Number of parameters to probe.
        #[arg(long, default_value_t = 200)]
        params: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Maximum allowed relative error.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

/// Exit code and family tag for each error variant. The stderr line
/// `error code=<n> family=<name> message="..."` is a stable interface;
/// scripts may match on either field.
fn classify(err: &Error) -> (u8, &'static str) {
    match err {
        Error::Config(_) => (2, "config"),
        Error::Io(_) => (3, "io"),
        Error::Format { .. } => (4, "format"),
        Error::Frame(_) | Error::InvalidLabel(_) => (5, "label"),
        Error::Dimension { .. } | Error::Shape { .. } | Error::Contract(_) => (6, "shape"),
        Error::DegenerateEvidence
        | Error::TotalConflict
        | Error::NonFinite { .. }
        | Error::Numeric { .. } => (7, "numeric"),
        Error::Train { .. } => (8, "train"),
    }
}

fn run(command: Command) -> efcn::Result<()> {
    match command {
        Command::Synth { config, out } => {
            let cfg = RunConfig::load(&config)?;
            commands::cmd_synth(&cfg, out)
        }
        Command::Train {
            config,
            dataset,
            checkpoint,
            history,
        } => {
            let cfg = RunConfig::load(&config)?;
            commands::cmd_train(&cfg, dataset, checkpoint, history)
        }
        Command::Predict {
            config,
            checkpoint,
            dataset,
            split,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            commands::cmd_predict(&cfg, checkpoint, dataset, &split, out)
        }
        Command::Evaluate {
            config,
            checkpoint,
            dataset,
            split,
            gamma_sweep,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            commands::cmd_evaluate(&cfg, checkpoint, dataset, &split, gamma_sweep, out)
        }
        Command::Calibrate {
            config,
            checkpoint,
            dataset,
            split,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            commands::cmd_calibrate(&cfg, checkpoint, dataset, &split, out)
        }
        Command::Owa {
            gamma,
            m,
            acts,
            soft_labels,
        } => commands::cmd_owa(gamma, m, &acts, soft_labels.as_deref()),
        Command::Gradcheck { params, seed, tol } => commands::cmd_gradcheck(params, seed, tol),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (code, family) = classify(&err);
            eprintln!("error code={code} family={family} message=\"{err}\"");
            ExitCode::from(code)
        }
    }
}
