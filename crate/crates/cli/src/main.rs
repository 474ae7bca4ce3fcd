//! `towerseg` — end-to-end toolkit for finding power-transmission towers in
//! airborne LiDAR: corpus synthesis, preprocessing, training, inference,
//! evaluation, and a small ablation harness.

mod cli;
mod commands;
mod corpus;
mod errors;
mod settings;

use std::process::ExitCode;

use clap::Parser;

use cli::{Cli, Command};
use commands::train::Task;
use errors::CliResult;

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Synth(args) => commands::synth::run(args),
        Command::Prep(args) => commands::prep::run(args),
        Command::TrainCls(args) => commands::train::run(args, Task::Classifier),
        Command::TrainSeg(args) => commands::train::run(args, Task::Segmenter),
        Command::Infer(args) => commands::infer::run(args),
        Command::Eval(args) => commands::eval::run(args),
        Command::Ablate(args) => commands::ablate::run(args),
    }
}

fn main() -> ExitCode {
    let parsed = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version land here too; clap picks stream and code
            // (0 for help/version, 2 for usage errors).
            let _ = e.print();
            return ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(2));
        }
    };
    match dispatch(parsed.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
