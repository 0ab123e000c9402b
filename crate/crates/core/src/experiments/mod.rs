//! Experiment orchestration: config schema, named checks, reports, and the
//! registries that map config names onto fields, drifts, costs, and controls.

pub mod checks;
pub mod config;
pub mod registry;
pub mod report;
pub mod runner;

pub use config::ExperimentConfig;
pub use report::{CheckReport, ExperimentReport, Metric, Verdict};
pub use runner::{run, RunOptions};
