//! Simulation designs, the experiment runner, and result summaries.

pub mod config;
pub mod datagen;
pub mod report;
pub mod rng;
pub mod runner;

pub use config::{ExperimentConfig, ExperimentKind, PriorSpec};
pub use report::{report, summarize, SummaryRow};
pub use runner::{run_experiment, run_experiment_to, ResultsRow, RunSummary};
