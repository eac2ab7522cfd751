use std::process::ExitCode;

use rankmm::RankError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Convergence(String),
    #[error("{0}")]
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Convergence(_) => 4,
            CliError::Verification(_) => 5,
        })
    }
}

impl From<RankError> for CliError {
    fn from(e: RankError) -> Self {
        let msg = e.to_string();
        match e {
            RankError::InvalidConfig(_) | RankError::OracleDimension { .. } => CliError::Usage(msg),
            RankError::ModeNotFound { .. } | RankError::Singular { .. } | RankError::NonFinite(_) => {
                CliError::Convergence(msg)
            }
            _ => CliError::Data(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
