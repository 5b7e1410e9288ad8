//! Seeded experiment orchestration and CSV output.
//!
//! Every trial derives its own seed from the master seed and the trial
//! index, and results are reduced in trial order, so a rerun with the same
//! configuration reproduces the CSV byte for byte.

mod config;
mod experiments;
mod output;

pub use config::{Experiment, ExperimentConfig, RunSettings};
pub use experiments::{run_extract, run_fig4, run_fig6, run_theorem1};
pub use output::{mean_and_std_error, to_csv_string, write_csv, Aggregator, ResultRow, TrialOutcome};

use crate::error::Result;

/// Resolve `cfg` for `experiment` and run it.
pub fn run(cfg: &ExperimentConfig, experiment: Experiment) -> Result<Vec<ResultRow>> {
    run_settings(&cfg.resolve(experiment)?)
}

pub fn run_settings(run: &RunSettings) -> Result<Vec<ResultRow>> {
    match run.experiment {
        Experiment::Fig4 => run_fig4(run),
        Experiment::Fig6 => run_fig6(run),
        Experiment::Theorem1 => run_theorem1(run),
        Experiment::Extract => run_extract(run),
    }
}
