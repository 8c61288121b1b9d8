//! Configuration, experiment orchestration and output files behind the CLI.

pub mod commands;
pub mod config;
pub mod experiment;

pub use config::{sub_seed, ExperimentConfig, Tier};
pub use experiment::{prepare, run_method, Method, RunOutcome};
