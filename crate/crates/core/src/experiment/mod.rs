//! Experiment orchestration: training, cross-validation, ablations,
//! diagnostics and gradient-check suites.

pub mod ablate;
pub mod config;
pub mod cv;
pub mod diagnose;
pub mod gradcheck;
pub mod report;
pub mod train;

pub use config::{ExperimentConfig, Profile};
