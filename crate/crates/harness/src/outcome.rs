use std::path::PathBuf;

use thermo_diffusion::Error;

/// A command that could not produce its result.
#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFiniteState { .. } | Error::DivergenceFailure { .. } | Error::Diverged { .. } => {
                Failure::Numerical(e.to_string())
            }
            other => Failure::Config(other.to_string()),
        }
    }
}

/// What a finished command wrote and which checks it failed.
#[derive(Debug, Default)]
pub struct Outcome {
    pub artifacts: Vec<PathBuf>,
    pub violations: Vec<String>,
    /// Cells of a sweep that failed numerically.
    pub numerical: Vec<String>,
}

impl Outcome {
    /// 0 pass, 3 numerical failure, 4 invariant violation.
    pub fn exit_code(&self) -> u8 {
        if !self.violations.is_empty() {
            4
        } else if !self.numerical.is_empty() {
            3
        } else {
            0
        }
    }
}
