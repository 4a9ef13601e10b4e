//! Experiment orchestration: config, the round loop, comparisons and run
//! artifacts.

use std::path::PathBuf;

use thiserror::Error;

use crate::data_fabric::DataError;
use crate::types::Round;

pub mod compare;
pub mod config;
pub mod export;
pub mod run;

pub use compare::{compare, compare_runs, ComparisonRow, ComparisonTable, RunSummary};
pub use config::{ExperimentConfig, Policy, TimingMode};
pub use run::{
    build_dataset, run_all_seeds, run_experiment, run_on_dataset, ClientRoles, EventKind,
    FairnessReport, RoundReport, RunEvent, RunLog,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("round {round}: {module}: {message}")]
    Module {
        round: Round,
        module: &'static str,
        message: String,
    },
    #[error("data_fabric: {0}")]
    Data(#[from] DataError),
    #[error("compare: {0}")]
    Compare(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

impl HarnessError {
    /// Name of the module the failure originated in.
    pub fn module(&self) -> &'static str {
        match self {
            HarnessError::Module { module, .. } => module,
            HarnessError::Data(_) => "data_fabric",
            HarnessError::Config(_) | HarnessError::Compare(_) => "harness",
            HarnessError::Io { .. } | HarnessError::Parse { .. } => "harness",
        }
    }
}
