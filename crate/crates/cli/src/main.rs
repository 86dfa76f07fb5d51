mod commands;
mod config;
mod manifest;

use std::process::ExitCode;

use clap::Parser;

pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_COMPUTATION: u8 = 3;

/// A numerical failure detected after inputs were accepted.
#[derive(Debug)]
pub struct ComputationFailure(pub String);

impl std::fmt::Display for ComputationFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ComputationFailure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<fairprice::Error>() {
            return if e.is_validation() { EXIT_VALIDATION } else { EXIT_COMPUTATION };
        }
        if cause.downcast_ref::<ComputationFailure>().is_some() {
            return EXIT_COMPUTATION;
        }
    }
    EXIT_VALIDATION
}

fn main() -> ExitCode {
    let cli = commands::Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
