use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("missing result in {}: {reason}", path.display())]
    MissingResult { path: PathBuf, reason: String },
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numerical(_) => 3,
            // A malformed result directory is bad input to `compare`.
            CliError::Validation(_) | CliError::MissingResult { .. } => 2,
            CliError::Io(_) => 1,
        }
    }
}
