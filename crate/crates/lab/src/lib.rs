//! Experiment driver for `sdd-core`: configuration, file formats and the
//! command-line subcommands.

pub mod config;
pub mod error;
pub mod experiment;
pub mod io;

pub use config::ExperimentConfig;
pub use error::{LabError, Result};
