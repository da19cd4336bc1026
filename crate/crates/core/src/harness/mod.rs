//! Experiment configuration, grid execution, statistics, reporting and CLI.

pub mod check;
pub mod cli;
pub mod config;
pub mod report;
pub mod run;
pub mod stats;

pub use config::{EnvConfig, ExperimentConfig, Method};
pub use run::{run_experiment, write_results, ReferenceCache, ResultRow};
