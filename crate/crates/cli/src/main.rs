//! `introlm`: one binary driving the whole pipeline.
//!
//! Every command writes its artifacts under `--out` (`data/`, `ckpt/`,
//! `metrics/`, `sweeps/`, `manifests/`) and records a manifest of its
//! resolved flags and input hashes.

mod args;
mod check;
mod config;
mod data;
mod eval;
mod manifest;
mod sweep;
mod train;

use std::process::ExitCode;

use args::{Cli, Command};

/// Exit status for failures that are not usage or I/O problems.
#[derive(Debug)]
pub struct InvariantFailure(pub String);

impl std::fmt::Display for InvariantFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "invariant check failed: {}", self.0)
    }
}

impl std::error::Error for InvariantFailure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<InvariantFailure>().is_some() {
        return 3;
    }
    for cause in err.chain() {
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<introlm_core::Error>() {
            if e.is_io() {
                return 2;
            }
        }
    }
    1
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::GenData(a) => data::run(g, a),
        Command::Train(a) => train::run(g, a),
        Command::Eval(a) => eval::run(g, a),
        Command::Sweep(a) => sweep::run(g, a),
        Command::CheckInvariance(a) => check::run(g, a),
        Command::LayerSweep(a) => train::layer_sweep(g, a),
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match config::parse(&argv) {
        Ok(cli) => cli,
        Err(config::ParseError::Clap(e)) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
        Err(config::ParseError::Config(e)) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(exit_code(&e));
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
