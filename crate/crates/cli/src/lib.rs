//! Pipeline commands behind the `rhotomo` binary: simulate, reconstruct,
//! train, evaluate and sweep priors.

pub mod commands;
pub mod config;

use rhotomo::field::FieldError;
use rhotomo::io::IoError;
use rhotomo::metrics::MetricsError;
use rhotomo::projector::ProjectorError;
use rhotomo::recon::ReconError;
use rhotomo::trainer::TrainError;
use thiserror::Error;

/// Failures split by exit code: bad input (1) or numerical trouble (2).
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Numeric(_) => 2,
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<ProjectorError> for CliError {
    fn from(e: ProjectorError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<ReconError> for CliError {
    fn from(e: ReconError) -> Self {
        match e {
            ReconError::NonFinite(_) => CliError::Numeric(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<FieldError> for CliError {
    fn from(e: FieldError) -> Self {
        match e {
            FieldError::NonFinite => CliError::Numeric(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } | TrainError::Field(FieldError::NonFinite) => CliError::Numeric(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}
