mod args;
mod commands;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use erase_core::{Error, ErrorClass};

use args::{Cli, Command};

fn exit_code(err: &Error) -> u8 {
    match err.class() {
        ErrorClass::Client => 2,
        ErrorClass::Validation => 3,
        ErrorClass::Numerical => 4,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(3),
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Scene(a) => commands::scene(a),
        Command::Bfe(a) => commands::bfe(a),
        Command::Run(a) => commands::run(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Serve(a) => commands::serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Parse { raw, .. } = &e {
                eprintln!("raw response:\n{raw}");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
