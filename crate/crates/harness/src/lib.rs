//! Experiment runner for prior-regularized surrogates: presets, the
//! tune-and-compare pipeline, repeatability runs and report artifacts.

pub mod config;
pub mod error;
pub mod experiment;
pub mod heatmap;
pub mod report;

pub use config::{preset, ExperimentConfig, Scale, TaskConfig, PRESETS};
pub use error::{HarnessError, Result};
pub use experiment::{repeatability_run, run_experiment, ExperimentOutcome, RepeatOutcome};
pub use heatmap::emit_heatmap;
pub use report::{aggregate, read_report, write_report, ReportRow};
