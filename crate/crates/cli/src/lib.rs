//! Command-line front end for INNER: simulation, training, evaluation,
//! learning-rate search, benchmarks and subgroup reports.

pub mod args;
pub mod commands;
pub mod error;
pub mod experiment;

pub use args::{Cli, Command, RunConfig};
pub use error::{CliError, CliResult, ExitCode};

/// Runs a parsed command line.
pub fn run(cli: Cli) -> CliResult<()> {
    let cfg = commands::resolve(cli)?;
    commands::execute(&cfg)
}
