//! Command-line front end: `eqlab <check|solve|anneal|verify|convergence>`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use eqlab::experiment::{run, Command, Overrides, RunConfig, EXIT_FAIL, EXIT_USAGE};

#[derive(Debug, Parser)]
#[command(
    name = "eqlab",
    version,
    about = "Regularized equilibria of time-inconsistent control problems"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,

    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Temperature for `solve` and `convergence`.
    #[arg(long, global = true)]
    lambda: Option<f64>,

    /// Worker threads.
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Estimate the standing-assumption constants.
    Check,
    /// Solve the regularized equilibrium at one temperature.
    Solve,
    /// Run the temperature schedule.
    Anneal,
    /// Spike-perturbation test of a candidate equilibrium.
    Verify {
        /// Directory written by `solve` (or a previous `verify`'s `candidate/`).
        #[arg(long)]
        candidate: Option<PathBuf>,
    },
    /// Residuals on nested grids.
    Convergence,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE as u8 } else { 0 });
        }
    };
    let mut cfg = match &cli.config {
        Some(p) => match RunConfig::load(p) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("eqlab: {e}");
                return ExitCode::from(EXIT_USAGE as u8);
            }
        },
        None => RunConfig::default(),
    };
    Overrides {
        lambda: cli.lambda,
        seed: cli.seed,
        out: cli.out.clone(),
        workers: cli.workers,
    }
    .apply(&mut cfg);
    if let Err(e) = cfg.validate() {
        eprintln!("eqlab: {e}");
        return ExitCode::from(EXIT_USAGE as u8);
    }
    if let Some(n) = cfg.experiment_cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("eqlab: cannot configure {n} workers: {e}");
            return ExitCode::from(EXIT_USAGE as u8);
        }
    }
    let command = match cli.command {
        Cmd::Check => Command::Check,
        Cmd::Solve => Command::Solve,
        Cmd::Anneal => Command::Anneal,
        Cmd::Verify { candidate } => Command::Verify { candidate },
        Cmd::Convergence => Command::Convergence,
    };
    match run(&command, &cfg) {
        Ok(out) => {
            println!("{}: {}", command.name(), out.message);
            ExitCode::from(out.exit_code as u8)
        }
        Err(e) => {
            eprintln!("eqlab {}: {e}", command.name());
            ExitCode::from(EXIT_FAIL as u8)
        }
    }
}
