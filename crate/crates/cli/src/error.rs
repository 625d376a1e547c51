use spil::SpilError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Spil(#[from] SpilError),

    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    /// 1 for usage errors, 2 for bad data or configuration, 3 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Spil(e) => match e {
                SpilError::Parse { .. }
                | SpilError::Validation { .. }
                | SpilError::EmptyCloud(_)
                | SpilError::EmptyInput(_)
                | SpilError::Config(_)
                | SpilError::Checkpoint(_)
                | SpilError::FormatVersion { .. }
                | SpilError::Io { .. }
                | SpilError::Json(_) => 2,
                _ => 3,
            },
            CliError::Internal(_) => 3,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
