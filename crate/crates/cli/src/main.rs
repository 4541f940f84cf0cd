//! `pvrf`: dataset generation, training, evaluation, ablation, robustness
//! sweeps and the self-check suite.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

/// Exit codes.
const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_VERIFY: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "pvrf", version, about = "Point-view relation fusion experiments")]
struct Cli {
    /// Experiment configuration (JSON). Built-in defaults apply when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Seed override, taking precedence over PVRF_SEED and the config file.
    /// Sets the dataset seed for gen-data and the training seed elsewhere.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Dataset base path (overrides paths.dataset).
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,

    /// Checkpoint directory (overrides paths.checkpoints).
    #[arg(long, global = true)]
    checkpoints: Option<PathBuf>,

    /// Report directory (overrides paths.reports).
    #[arg(long, global = true)]
    reports: Option<PathBuf>,

    /// Training epochs (overrides schedule.total_epochs).
    #[arg(long, global = true)]
    epochs: Option<usize>,

    /// Frozen-encoder epochs of fusion training (overrides schedule.freeze_epochs).
    #[arg(long, global = true)]
    freeze_epochs: Option<usize>,

    /// Largest multi-view set (overrides model.fusion.top_k).
    #[arg(long, global = true)]
    top_k: Option<usize>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset.
    GenData {
        /// Overwrite an existing dataset.
        #[arg(long)]
        force: bool,
    },
    /// Train one model family and evaluate it on the test split.
    Train {
        mode: Mode,
        /// Validate the configuration and print parameter counts only.
        #[arg(long)]
        dry_run: bool,
        /// Fusion mode: single-view fusion only instead of single plus multi-view.
        #[arg(long)]
        single_view: bool,
    },
    /// Evaluate a trained checkpoint (accuracy and retrieval mAP).
    Eval {
        /// point_only, view_only, late_fusion, sfusion or sm_fusion_k<K>;
        /// defaults to sm_fusion_k<top_k>.
        #[arg(long)]
        model: Option<String>,
    },
    /// Train and evaluate every ablation model.
    Ablate,
    /// Missing-view and missing-point sweeps over trained checkpoints.
    Robustness {
        /// Fusion model to sweep; defaults to sm_fusion_k<top_k>.
        #[arg(long)]
        model: Option<String>,
        /// Read checkpoints written by `ablate` instead of `train`.
        #[arg(long)]
        from_ablation: bool,
    },
    /// Run gradient checks, invariants and reference oracles.
    Verify {
        #[arg(long, hide = true)]
        sign_flip: Option<String>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    Point,
    View,
    Fusion,
    Late,
}

/// Failure classes, mapped to exit codes.
#[derive(Debug)]
enum Failure {
    Validation(String),
    Runtime(String),
    Verification,
}

impl From<pvrf_core::Error> for Failure {
    fn from(e: pvrf_core::Error) -> Self {
        use pvrf_core::Error;
        match e {
            Error::Config(_) | Error::Usage(_) => Failure::Validation(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_VALIDATION) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    pvrf_core::tune_allocator();

    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_VALIDATION)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_RUNTIME)
        }
        Err(Failure::Verification) => ExitCode::from(EXIT_VERIFY),
    }
}
