//! Reproducible experiment runs over the synthetic adverse-condition
//! benchmark: dataset generation, source pretraining, adaptation,
//! evaluation, shift analysis, and ablation sweeps.

pub mod commands;
pub mod config;

pub use commands::{run, Command};
pub use config::{resolve, RunConfig, Sources};
