//! Configuration, experiment orchestration and file outputs for the `udam`
//! command-line tool.

pub mod config;
pub mod error;
pub mod experiment;

pub use config::{parse_config, parse_override, parse_str, ExperimentConfig};
pub use error::CliError;
