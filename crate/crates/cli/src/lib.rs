//! Experiment runner behind the `wgf` binary.

pub mod compare;
pub mod config;
pub mod error;
pub mod experiment;

pub use config::{load_config, ExperimentConfig};
pub use error::CliError;
pub use experiment::{run_experiment, Outcome};
