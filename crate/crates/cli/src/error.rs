use std::process::ExitCode;

use thiserror::Error;

use crate::ingest::IngestError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("input error: {0}")]
    Input(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("config error: {0}")]
    Config(String),

    /// Outputs of a replay differ from the recorded digests.
    #[error("replay mismatch: {0}")]
    Mismatch(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.code())
    }

    pub fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Numerical(_) | CliError::Mismatch(_) => 3,
            CliError::Config(_) => 4,
        }
    }

    pub fn io(context: impl std::fmt::Display, e: std::io::Error) -> Self {
        CliError::Input(format!("{context}: {e}"))
    }
}

impl From<wicm::Error> for CliError {
    fn from(e: wicm::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Input(e.to_string())
        }
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        match e {
            IngestError::Dataset(inner) => inner.into(),
            other => CliError::Input(other.to_string()),
        }
    }
}
