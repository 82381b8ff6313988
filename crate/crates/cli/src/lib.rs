//! Library side of the `fedqot` binary: configuration, argument parsing and
//! the subcommands.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;

pub use config::RunConfig;
pub use error::CliError;

use args::Command;

/// Runs a parsed command to completion.
pub fn run(command: &Command) -> Result<(), CliError> {
    let cfg = command.resolve()?;
    match command {
        Command::GenData { .. } => {
            let s = commands::gen_data(&cfg)?;
            println!(
                "wrote {} domains (sizes {:?}), holdout {}, positive fraction {:.4}, schema hash {:016x}",
                s.domain_sizes.len(),
                s.domain_sizes,
                s.holdout_size,
                s.positive_fraction,
                s.schema_hash
            );
        }
        Command::Simulate { .. } => {
            commands::simulate(&cfg)?;
        }
        Command::Centralized { .. } => {
            commands::centralized(&cfg)?;
        }
        Command::Evaluate { .. } => {
            commands::evaluate(&cfg)?;
        }
        Command::Tcn { .. } => {
            runtime()?.block_on(commands::tcn(&cfg))?;
        }
        Command::Ecn { .. } => {
            runtime()?.block_on(commands::ecn(&cfg))?;
        }
    }
    Ok(())
}

fn runtime() -> Result<tokio::runtime::Runtime, CliError> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Runtime(format!("cannot start async runtime: {e}")))
}
