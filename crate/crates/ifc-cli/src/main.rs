//! `ifc` — reproducible multi-fidelity surrogate experiments.
//!
//! Subcommands: `generate` (PDE datasets), `train` (any model kind),
//! `eval` (test nRMSE of a checkpoint), `sweep-fidelity` (prediction error
//! across a grid of fidelities against a reference dataset).
//!
//! Option precedence: command-line flags override a `--config` TOML file,
//! which overrides built-in defaults. Every output directory receives a
//! `run_config.json` echo of the resolved configuration; re-running with the
//! same configuration reproduces datasets, checkpoints and CSV reports
//! byte-for-byte (the metrics JSON additionally records wall time).

mod config;
mod run;

use clap::error::ErrorKind;
use clap::Parser;
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(name = "ifc", version, about = "Multi-fidelity PDE surrogate modeling")]
struct Cli {
    #[command(subcommand)]
    command: config::Command,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            // unknown flags, bad values: configuration errors
            eprintln!("{e}");
            return ExitCode::from(1);
        }
    };
    match run::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(run::CliError::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(run::CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
