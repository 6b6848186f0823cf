//! `groundlab`: data generation, training, attention analysis, segmentation
//! and fine-tuning for the toy MM-DiT.

mod args;
mod jobs;
mod manifest;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use crate::args::Cli;

const EXIT_USAGE: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<groundlab::Error>() {
            return match e {
                groundlab::Error::Io { .. }
                | groundlab::Error::Load { .. }
                | groundlab::Error::Format { .. }
                | groundlab::Error::Json(_) => EXIT_IO,
                groundlab::Error::Numeric(_) => EXIT_NUMERIC,
                _ => EXIT_USAGE,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    EXIT_USAGE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    let argv: Vec<String> = std::env::args().collect();
    match cli.command.into_job().and_then(|job| jobs::execute(job, argv)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
