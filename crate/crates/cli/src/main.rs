//! `nnrk` — pipeline driver for neural-corrected Runge-Kutta experiments:
//! dataset generation, training, threshold calibration, simulation, and
//! benchmarking, all from one JSON config.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 numerical
//! divergence, 4 total benchmark failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nnrk_core::Error;

/// Error with the process exit code it maps to.
#[derive(Debug)]
pub struct AppError {
    pub code: u8,
    pub message: String,
}

impl AppError {
    fn config(message: String) -> Self {
        Self { code: 2, message }
    }

    fn numerical(message: String) -> Self {
        Self { code: 3, message }
    }

    fn bench_failure(message: String) -> Self {
        Self { code: 4, message }
    }
}

/// Divergence and blow-up errors exit with 3; everything else is an input
/// or configuration problem (2).
fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. }
        | Error::NonFiniteStage { .. }
        | Error::NonFiniteCorrection { .. }
        | Error::NonFiniteLoss { .. } => 3,
        Error::StepFailed { source, .. } => exit_code_for(source),
        _ => 2,
    }
}

impl From<Error> for AppError {
    fn from(e: Error) -> Self {
        Self {
            code: exit_code_for(&e),
            message: e.to_string(),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "nnrk",
    about = "Runge-Kutta solvers with learned local-error corrections",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build training/validation datasets of scaled local errors.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the correction network on generated datasets.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Calibrate the hybrid acceptance threshold on the training set.
    Calibrate {
        #[arg(long)]
        config: PathBuf,
        /// Model file (default: <out>/<run_id>/model.json).
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Integrate one trajectory with the chosen solver.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        /// plain | richardson | enhanced | hybrid | reference
        #[arg(long)]
        mode: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the accuracy-vs-effort sweeps and write metrics + summaries.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// `NNRK_THREADS` caps sweep parallelism; unset keeps rayon's default
/// (machine core count).
fn init_threads() -> Result<(), AppError> {
    match std::env::var("NNRK_THREADS") {
        Err(_) => Ok(()),
        Ok(raw) => {
            let n: usize = raw.parse().map_err(|_| {
                AppError::config(format!("NNRK_THREADS must be a positive integer, got '{raw}'"))
            })?;
            if n == 0 {
                return Err(AppError::config(
                    "NNRK_THREADS must be a positive integer, got '0'".into(),
                ));
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| AppError::config(format!("cannot size thread pool: {e}")))
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), AppError> {
    match cli.command {
        Command::Generate { config, out } => {
            let cfg = config::load_config(&config)?;
            commands::cmd_generate(&cfg, out.as_deref())
        }
        Command::Train { config, out } => {
            let cfg = config::load_config(&config)?;
            commands::cmd_train(&cfg, out.as_deref())
        }
        Command::Calibrate { config, model, out } => {
            let cfg = config::load_config(&config)?;
            commands::cmd_calibrate(&cfg, model.as_deref(), out.as_deref())
        }
        Command::Simulate {
            config,
            model,
            mode,
            out,
        } => {
            let cfg = config::load_config(&config)?;
            commands::cmd_simulate(&cfg, model.as_deref(), &mode, out.as_deref())
        }
        Command::Bench { config, model, out } => {
            let cfg = config::load_config(&config)?;
            commands::cmd_bench(&cfg, model.as_deref(), out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {}", e.message);
        return ExitCode::from(e.code);
    }
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
