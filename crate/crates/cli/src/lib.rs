//! Library side of the `icscan` binary, so tests can drive commands directly.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use commands::{run, Cli, Command};
pub use config::{load, Layers, RunConfig};
pub use error::CliError;
