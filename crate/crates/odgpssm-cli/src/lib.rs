//! Experiment harness for output-dependent GPSSM studies: dataset
//! ingestion, standardization, orchestration of the synthetic and
//! system-identification experiments, metrics, and result emission.

pub mod config;
pub mod datagen;
pub mod dataset;
pub mod experiments;
pub mod metrics;
pub mod record;

use thiserror::Error;

/// Harness errors, grouped by the process exit code they map to.
#[derive(Debug, Error)]
pub enum CliError {
    /// Exit code 2: bad configuration or command line.
    #[error("config error: {0}")]
    Config(String),
    /// Exit code 3: missing, malformed, or tampered data, or output I/O.
    #[error("data error: {0}")]
    Data(String),
    /// Exit code 4: a numerical failure inside the model or training.
    #[error("numerical failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError::Data(msg.into())
    }
}

impl From<odgpssm_core::ModelError> for CliError {
    fn from(e: odgpssm_core::ModelError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<odgpssm_core::LinalgError> for CliError {
    fn from(e: odgpssm_core::LinalgError) -> Self {
        CliError::Numeric(e.to_string())
    }
}
