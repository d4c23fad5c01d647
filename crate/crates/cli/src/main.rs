//! `bhm`: calibration, propagation, sensitivity, distillation and fusion
//! from the command line.

mod artifacts;
mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use bhm_core::bench::BenchKind;
use clap::{Parser, Subcommand};

use crate::error::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "bhm", version, about = "Bayesian hybrid modeling toolkit")]
struct Cli {
    /// Log progress (RUST_LOG overrides).
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Calibrate a simulator against observations (transient when the data have a time column).
    Calibrate(RunArgs),
    /// Calibrate time-history outputs through a reduced basis.
    CalibrateTransient(RunArgs),
    /// Predict with a saved model.
    Predict {
        #[command(flatten)]
        run: RunArgs,
        /// The model file is a portable model.
        #[arg(long)]
        portable: bool,
    },
    /// Robust design optimization under Gaussian input uncertainty.
    RobustOpt(RunArgs),
    /// Sobol sensitivity indices of a GP surrogate.
    Sensitivity(RunArgs),
    /// Distill a surrogate into a portable model.
    Distill(RunArgs),
    /// Fuse legacy-system models for a new system.
    Fuse(RunArgs),
    /// Write a synthetic problem bundle and a matching run config.
    Bench {
        #[arg(long)]
        kind: BenchKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Bundle directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    /// Run configuration (JSON).
    config: PathBuf,
    /// Output directory (overrides BHM_OUT_DIR and the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn init_threads() -> CliResult<()> {
    let Some(v) = std::env::var_os("BHM_THREADS") else { return Ok(()) };
    let s = v.to_string_lossy();
    let n: usize = s.trim().parse().map_err(|_| CliError::Config(format!("BHM_THREADS: expected a positive integer, got '{s}'")))?;
    if n == 0 {
        return Err(CliError::Config("BHM_THREADS: must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Config(format!("BHM_THREADS: {e}")))
}

fn run(cli: Cli) -> CliResult<()> {
    init_threads()?;
    match cli.command {
        Command::Calibrate(a) => commands::run_calibrate(&a.config, a.out.as_deref(), false),
        Command::CalibrateTransient(a) => commands::run_calibrate(&a.config, a.out.as_deref(), true),
        Command::Predict { run, portable } => commands::run_predict(&run.config, run.out.as_deref(), portable),
        Command::RobustOpt(a) => commands::run_robust_opt(&a.config, a.out.as_deref()),
        Command::Sensitivity(a) => commands::run_sensitivity(&a.config, a.out.as_deref()),
        Command::Distill(a) => commands::run_distill(&a.config, a.out.as_deref()),
        Command::Fuse(a) => commands::run_fuse(&a.config, a.out.as_deref()),
        Command::Bench { kind, seed, out } => commands::run_bench(kind, seed, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
