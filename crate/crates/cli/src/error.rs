use std::path::Path;

use thiserror::Error;

/// Command failures, grouped by the exit code they map to.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    pub(crate) fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {err}", path.display()))
    }
}

impl From<optcharge_core::Error> for CliError {
    fn from(err: optcharge_core::Error) -> Self {
        use optcharge_core::Error as E;
        let msg = err.to_string();
        match err {
            E::Config(_) | E::Dimension { .. } | E::Problem(_) | E::SamplingExhausted { .. } => {
                CliError::Validation(msg)
            }
            E::Numerical(_) | E::Diverged { .. } => CliError::Numerical(msg),
            E::Io(_) | E::Csv(_) | E::Json(_) => CliError::Io(msg),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
