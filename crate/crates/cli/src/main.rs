//! Command-line entry point for the advising pipeline.
//!
//! Subcommands: `gen-data` (synthetic pool + optional consistent holdings),
//! `infer` (risk-profile estimation from price/holdings files), `train`
//! (grid training with validation-Sharpe selection), `backtest` (windowed
//! randomized-portfolio evaluation) and `eval-policy` (run a saved policy
//! on an episode file). Every subcommand accepts `--config <json>` whose
//! keys mirror the flags; flags override file values. Outputs embed the
//! resolved configuration and seeds.
//!
//! Exit codes: 2 usage, 3 data, 4 solver/training. Failures print one
//! machine-readable JSON record on stderr.

mod commands;
mod error;
mod params;

use clap::{Parser, Subcommand};
use error::CliError;

#[derive(Parser)]
#[command(name = "advisor", version, about = "Inverse-optimization + RL portfolio pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic price pool (and optionally consistent holdings).
    GenData(params::GenDataFlags),
    /// Infer time-varying risk tolerance and expected returns from files.
    Infer(params::InferFlags),
    /// Train policies over a hyperparameter grid and keep the best.
    Train(params::TrainFlags),
    /// Run the windowed backtest over randomized portfolios.
    Backtest(params::BacktestFlags),
    /// Roll a saved policy through an episode file and report metrics.
    EvalPolicy(params::EvalPolicyFlags),
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(f) => commands::gen_data(f),
        Command::Infer(f) => commands::infer(f),
        Command::Train(f) => commands::train(f),
        Command::Backtest(f) => commands::backtest(f),
        Command::EvalPolicy(f) => commands::eval_policy(f),
    };
    match result {
        Ok(()) => {}
        Err(e) => {
            eprintln!("{}", e.machine_record());
            std::process::exit(e.exit_code());
        }
    }
}
