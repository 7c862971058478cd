//! Batch front end for the robust-optimization library: one-shot solves,
//! radius sweeps with out-of-sample evaluation, reference-problem
//! verification, and decision scoring, all driven by a JSON config.

mod config;
mod eval;
mod run;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Exit code for a solver-reported pathology (unbounded or infeasible).
pub const EXIT_PATHOLOGY: u8 = 1;
/// Exit code for a usage or configuration error.
pub const EXIT_USAGE: u8 = 2;
/// Exit code when the solver reached no conclusive status.
pub const EXIT_NUMERICAL: u8 = 3;

/// Terminal failure of a subcommand: an exit code plus a message for stderr.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn io(context: &str, err: std::io::Error) -> Self {
        Failure {
            code: EXIT_USAGE,
            message: format!("{context}: {err}"),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "wdro",
    version,
    about = "Distributionally robust optimization over moment relaxations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the configured problem at a single radius
    Solve(RunArgs),
    /// Solve every radius in the config and emit one CSV row per radius
    Sweep(RunArgs),
    /// Re-run the packaged reference problems and compare against known values
    Verify(VerifyArgs),
    /// Score a stored decision sample by sample
    Eval(EvalArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration
    #[arg(long)]
    config: PathBuf,

    /// Write CSV here (overrides the config's `out`; default stdout)
    #[arg(long)]
    out: Option<PathBuf>,

    /// Replace the config's radius list with this single radius
    #[arg(long)]
    radius: Option<f64>,

    /// Worker threads for the inner solves (0 = all cores)
    #[arg(long, default_value_t = 0)]
    threads: usize,

    /// Per-radius progress on standard error
    #[arg(long)]
    verbose: bool,

    /// Zero the time_s column so identical runs emit identical bytes
    #[arg(long)]
    stable_output: bool,
}

#[derive(Args)]
struct VerifyArgs {
    /// Worker threads for the inner solves (0 = all cores)
    #[arg(long, default_value_t = 0)]
    threads: usize,

    /// Extra diagnostics on standard error
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// JSON run configuration
    #[arg(long)]
    config: PathBuf,

    /// JSON array with the first-stage decision
    #[arg(long)]
    decision: PathBuf,

    /// Write CSV here (overrides the config's `out`; default stdout)
    #[arg(long)]
    out: Option<PathBuf>,

    /// Worker threads for the evaluation LPs (0 = all cores)
    #[arg(long, default_value_t = 0)]
    threads: usize,

    /// Extra diagnostics on standard error
    #[arg(long)]
    verbose: bool,
}

/// Pin the global worker pool when a thread count is forced.
fn init_threads(n: usize) -> Result<(), Failure> {
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::usage(format!("thread pool setup failed: {e}")))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Solve(args) => init_threads(args.threads).and_then(|()| run::cmd_solve(&args)),
        Command::Sweep(args) => init_threads(args.threads).and_then(|()| run::cmd_sweep(&args)),
        Command::Verify(args) => init_threads(args.threads).and_then(|()| verify::cmd_verify(&args)),
        Command::Eval(args) => init_threads(args.threads).and_then(|()| eval::cmd_eval(&args)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}
