//! Config-driven orchestration: simulate -> train -> evaluate, grid sweeps,
//! and report merging. Every output byte is a deterministic function of
//! (config, seeds).

pub mod config;
pub mod report;
pub mod runner;
pub mod sweep;

pub use config::{ExperimentConfig, SweepConfig, SweepParameter};
pub use report::{report, report_to_dir, MergedReport};
pub use runner::{prepare_data, run_experiment, run_experiment_with, RunAggregate, RunOptions};
pub use sweep::{run_sweep, SweepResult};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
    #[error(transparent)]
    Policy(#[from] crate::policy::PolicyError),
    #[error(transparent)]
    Click(#[from] crate::clicksim::ClickError),
    #[error(transparent)]
    Model(#[from] crate::models::ModelError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
}

impl ExperimentError {
    /// CLI exit code: 1 for configuration problems, 2 for runtime failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            ExperimentError::Config(_) => 1,
            _ => 2,
        }
    }
}
