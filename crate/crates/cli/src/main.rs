mod args;
mod commands;
mod error;

use std::process::ExitCode;

use args::Command;
use error::CliError;

fn run() -> Result<(), CliError> {
    let parsed = args::parse(std::env::args_os().collect())?;
    let cli = &parsed.cli;
    match &cli.command {
        Command::Synth(a) => commands::synth(cli, a),
        Command::Train(a) => commands::train(cli, a, &parsed.matches),
        Command::Eval(a) => commands::eval(cli, a),
        Command::Infer(a) => commands::infer(cli, a),
        Command::Gradcheck => commands::gradcheck(cli),
        Command::Inspect(a) => commands::inspect(a),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Clap(e)) => {
            let _ = e.print();
            code_of(CliError::Clap(e).exit_code())
        }
        Err(e) => {
            eprintln!("error: {e}");
            code_of(e.exit_code())
        }
    }
}

fn code_of(code: i32) -> ExitCode {
    ExitCode::from(code as u8)
}
