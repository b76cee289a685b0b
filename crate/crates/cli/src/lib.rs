//! Command-line pipeline: simulate, train, evaluate, predict, rollout and
//! the multi-regime reproduction run.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod reproduce;

use std::ffi::OsString;

use clap::{Parser, Subcommand};

pub use config::RunConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "tlsr", version, about = "Joint longitudinal, recurrent-event and survival transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a cohort with ground truth.
    Simulate(commands::SimulateArgs),
    /// Train a model on a cohort file.
    Train(commands::TrainArgs),
    /// Evaluate a checkpoint on the evaluation split.
    Evaluate(commands::EvaluateArgs),
    /// Predict one quantity for one patient.
    Predict(commands::PredictArgs),
    /// Predict the next visit and its longitudinal values.
    Rollout(commands::RolloutArgs),
    /// Repeat simulate, train and evaluate per censoring regime.
    Reproduce(commands::ReproduceArgs),
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate_cmd(a),
        Command::Predict(a) => commands::predict(a),
        Command::Rollout(a) => commands::rollout_cmd(a),
        Command::Reproduce(a) => commands::reproduce_cmd(a).map(|_| ()),
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
