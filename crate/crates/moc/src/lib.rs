//! Experiment harness: configuration files, the CLI, run directories,
//! checkpoints, cross-seed aggregation and plots.

pub mod aggregate;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod plots;
pub mod run;
