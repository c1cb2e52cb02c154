//! Command-line front end: experiment configs, subcommands and report
//! serialization.

mod commands;
pub mod config;
mod error;

pub use commands::{run, run_subcommand};
pub use config::{load_config, parse_config, ExperimentConfig};
pub use error::CliError;
