//! Configuration, command dispatch and report files for the `memlq` binary.

pub mod config;
pub mod error;
pub mod output;
pub mod run;

pub use config::{parse_config, Command, ConfigFile, RunPlan};
pub use error::CliError;
pub use output::{Check, Checks};
pub use run::{run, Outcome};
