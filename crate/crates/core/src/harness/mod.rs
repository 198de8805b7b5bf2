//! Configuration, multi-seed execution and CSV/JSON emission.

pub mod config;
pub mod experiments;
pub mod runner;
pub mod summary;
pub mod table;

pub use config::{Experiment, ExperimentConfig, OptimMode};
pub use runner::run_experiment;
pub use summary::{aggregate, RunSummary, Verdict};
pub use table::{Schema, Table};
