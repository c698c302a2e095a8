//! Experiment driver for the broad-spectrum diffractive network: config
//! resolution, dataset loading, training/evaluation commands and artifact
//! writers behind the `bsd2nn` binary.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod render;
pub mod report;

pub use config::RunConfig;
pub use error::CliError;
