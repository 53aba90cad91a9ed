//! Command errors and their exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, configuration or inputs; exit code 2.
    #[error("{0}")]
    Usage(String),

    /// Failure while doing the work; exit code 1.
    #[error("{0}")]
    Runtime(String),

    #[error(transparent)]
    Core(#[from] pfoa_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use pfoa_core::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
            CliError::Core(e) => match e {
                E::Validation(_) | E::Config { .. } | E::Schema(_) | E::Metric(_) | E::Load(_) => 2,
                _ => 1,
            },
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            2 => "usage",
            _ => "runtime",
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Usage error for an upstream artifact that is not where it should be.
pub fn missing(path: &std::path::Path, produced_by: &str) -> CliError {
    CliError::Usage(format!(
        "missing {}; run `pfoa {produced_by}` first",
        path.display()
    ))
}
