use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{location}: {message}")]
    Parse { location: String, message: String },
    #[error("precondition violated: {0}")]
    Precondition(String),
    /// The run started but could not finish (for example a solver that did
    /// not converge); reported as a failed assertion.
    #[error("{0}")]
    Failed(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse { .. } => 2,
            CliError::Precondition(_) | CliError::Io(_) => 3,
            CliError::Failed(_) => 1,
        }
    }
}
