//! Experiment CLI: `run` executes a sweep, `reduce` aggregates raw rows,
//! `verify` checks the closed forms against the Monte Carlo oracle.
//!
//! Exit codes: 0 success, 2 configuration error, 3 evaluation failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cfnoma", about = "Cell-free massive MIMO-NOMA experiment driver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured sweep and write CSV + manifest.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Aggregate a raw results file into per-group means and intervals.
    Reduce {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte Carlo validation of the closed-form rates.
    Verify {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            out,
            threads,
        } => {
            let cfg = match cfnoma::scenario::parse_config(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("config error: {e}");
                    return ExitCode::from(2);
                }
            };
            match cfnoma::sweep::run_sweep(&cfg, &out, threads) {
                Ok(summary) => {
                    eprintln!(
                        "wrote {} rows to {} ({} failures)",
                        summary.rows,
                        out.display(),
                        summary.failures
                    );
                    if summary.failures > 0 {
                        ExitCode::from(3)
                    } else {
                        ExitCode::SUCCESS
                    }
                }
                Err(e) => {
                    eprintln!("run failed: {e}");
                    ExitCode::from(3)
                }
            }
        }
        Command::Reduce { input, out } => match cfnoma::sweep::reduce_results(&input, &out) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("reduce failed: {e}");
                ExitCode::from(2)
            }
        },
        Command::Verify { config } => {
            let cfg = match cfnoma::scenario::parse_config(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("config error: {e}");
                    return ExitCode::from(2);
                }
            };
            match cfnoma::sweep::verify_config(&cfg) {
                Ok(outcome) => {
                    eprintln!(
                        "worst term error {:.4}, worst SE error {:.4} (tolerance {}), resamples {}",
                        outcome.worst_term_error,
                        outcome.worst_se_error,
                        cfg.mc.tolerance,
                        outcome.resamples
                    );
                    if outcome.passed {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(3)
                    }
                }
                Err(e) => {
                    eprintln!("verify failed: {e}");
                    ExitCode::from(3)
                }
            }
        }
    }
}
