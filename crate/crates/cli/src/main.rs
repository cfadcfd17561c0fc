//! `coca` command-line driver.

mod args;
mod commands;
mod output;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use coca_core::Error;

use crate::args::{split_overrides, Cli};

/// Prints the one-line machine-readable error and returns its exit code.
fn fail(kind: &str, code: u8, message: &str) -> ExitCode {
    let line = serde_json::json!({"error": kind, "exit_code": code, "message": message});
    eprintln!("{line}");
    ExitCode::from(code)
}

fn fail_with(err: &Error) -> ExitCode {
    let code = u8::try_from(err.exit_code()).unwrap_or(1);
    fail(err.kind(), code, &err.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv = match split_overrides(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => return fail_with(&e),
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
            eprint!("{e}");
            return ExitCode::from(2);
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            return fail("config error", 2, first);
        }
    };
    match commands::run(&cli.command) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => fail_with(&e),
    }
}
