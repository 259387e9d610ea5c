use thiserror::Error;

/// Failures mapped to process exit codes.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config or input files.
    #[error("{0}")]
    Input(String),
    /// The command ran but produced nothing usable.
    #[error("{0}")]
    Empty(String),
    #[error("internal failure: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Empty(_) => 3,
            CliError::Internal(_) => 4,
        }
    }
}

impl From<sae_unlearn::Error> for CliError {
    fn from(e: sae_unlearn::Error) -> Self {
        match e {
            sae_unlearn::Error::Shape { .. } => CliError::Internal(e.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}
