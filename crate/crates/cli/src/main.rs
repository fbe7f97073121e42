//! `deid-bench`: dataset generation, pipeline runs, OCR benchmarking,
//! evaluation, reports, serving and load tests.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 backend or
//! transport error.

mod args;
mod commands;
mod error;

use std::io::IsTerminal;
use std::process::ExitCode;

use tracing_subscriber::EnvFilter;

fn main() -> ExitCode {
    let argv: Vec<_> = std::env::args_os().collect();
    let (cli, effective) = match args::parse(argv) {
        Ok(parsed) => parsed,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = if cli.verbose { "debug" } else { "info" };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(level)))
        .init();
    match commands::dispatch(&cli, &effective) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            tracing::error!(command = cli.command.name(), "{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
