mod args;
mod commands;

use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches};
use rrn_core::Error;

use crate::args::Cli;

/// Exit status and the tag printed in `error[tag]: message`.
fn classify(err: &Error) -> (u8, &'static str) {
    match err {
        Error::Config(_) => (2, "usage"),
        Error::Parse { .. }
        | Error::Format(_)
        | Error::Incompatible(_)
        | Error::InsufficientOverlap { .. }
        | Error::Io(_)
        | Error::Json(_) => (3, "data"),
        Error::Degenerate(_) | Error::Training { .. } => (4, "numerical"),
        Error::Shape { .. } | Error::Contract(_) => (1, "internal"),
    }
}

fn main() -> ExitCode {
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error[usage]: {}", e.to_string().trim());
            return ExitCode::from(2);
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.verbose {
            log::LevelFilter::Info
        } else {
            log::LevelFilter::Warn
        })
        .parse_default_env()
        .init();
    match commands::run(cli, &matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, tag) = classify(&e);
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{tag}]: {msg}");
            ExitCode::from(code)
        }
    }
}
