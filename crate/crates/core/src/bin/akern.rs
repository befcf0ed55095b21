//! Experiment runner for the adaptive kernel solvers.
//!
//! ```text
//! akern <subcommand> --config <path> --out <dir> [--seed N]
//! ```
//!
//! Subcommands: anbk, antk, linear, lazy, oracle, compare, fixedpoint.
//! Exit codes: 0 success, 1 config error, 2 data error, 3 solver
//! divergence, 4 non-convergence (results written, flagged).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use akern_core::config::RunConfig;
use akern_core::runner::{self, RunOutcome};

#[derive(Parser, Debug)]
#[command(name = "akern", about = "Adaptive kernel predictors for wide networks")]
struct Cli {
    /// Subcommand: anbk | antk | linear | lazy | oracle | compare | fixedpoint
    subcommand: String,
    /// Path to the JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for results and the manifest.
    #[arg(long)]
    out: PathBuf,
    /// Override the config's root seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    let command = match runner::parse_command(&cli.subcommand) {
        Some(c) => c,
        None => {
            eprintln!(
                "unknown subcommand '{}'; expected one of anbk, antk, linear, lazy, oracle, compare, fixedpoint",
                cli.subcommand
            );
            return ExitCode::from(1);
        }
    };

    let text = match std::fs::read_to_string(&cli.config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("cannot read config {}: {e}", cli.config.display());
            return ExitCode::from(1);
        }
    };
    let mut config = match RunConfig::from_json(&text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(1);
        }
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }

    match runner::run(command, &config, &cli.out) {
        Ok(RunOutcome::Success) => {
            println!("{}: ok, outputs in {}", command.name(), cli.out.display());
            ExitCode::SUCCESS
        }
        Ok(RunOutcome::NonConverged) => {
            eprintln!(
                "{}: finished without meeting its tolerance; results written and flagged",
                command.name()
            );
            ExitCode::from(4)
        }
        Err(e) => {
            let code = runner::exit_code_for(&e);
            eprintln!("{}: {e}", command.name());
            ExitCode::from(code as u8)
        }
    }
}
