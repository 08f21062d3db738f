//! Configuration loading and the `optcharge` subcommands.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{Checkpoint, EvalTarget, Overrides};
pub use config::{Experiment, ExperimentConfig};
pub use error::{CliError, Result};
