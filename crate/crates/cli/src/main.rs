//! `vtpose` command-line driver.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric
//! failure (non-finite loss, failed gradient check).

mod common;
mod eval;
mod generate;
mod gradcheck;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "vtpose", version, about = "Visuotactile in-hand pose estimation: data, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a dataset of grasped objects and write it with its manifest.
    Generate(generate::GenerateArgs),
    /// Train a network on the train split of a dataset.
    Train(train::TrainArgs),
    /// Evaluate checkpoints on the test split and write reports.
    Eval(eval::EvalArgs),
    /// Compare analytic and finite-difference gradients per parameter tensor.
    Gradcheck(gradcheck::GradcheckArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Generate(a) => generate::run(a),
        Command::Train(a) => train::run(a),
        Command::Eval(a) => eval::run(a),
        Command::Gradcheck(a) => gradcheck::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(common::exit_code(&e))
        }
    }
}
