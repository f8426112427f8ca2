//! Experiment driver for tilted-flow energy models: configuration, the
//! subcommands as library functions, and CSV/checkpoint emission.

pub mod commands;
pub mod config;
pub mod error;

pub use config::RunConfig;
pub use error::CliError;
