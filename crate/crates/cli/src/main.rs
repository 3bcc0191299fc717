//! `molgap` command-line entry point.

mod args;
mod commands;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use error::CliError;

/// Runs one command; returns the outputs recorded in its manifest.
fn execute(cmd: Command) -> Result<Vec<PathBuf>, CliError> {
    match cmd {
        Command::Synth(a) => commands::synth(a),
        Command::Validate(a) => commands::validate(a).map(|_| Vec::new()),
        Command::Featurize(a) => commands::featurize(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Ensemble(a) => commands::ensemble(a),
        Command::CountParams(a) => commands::count_params(a).map(|_| Vec::new()),
        Command::Replay(a) => commands::replay(a).map(|_| Vec::new()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match execute(cli.command) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
