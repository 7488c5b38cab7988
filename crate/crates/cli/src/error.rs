//! Error categories mapped one-to-one onto process exit codes.

use std::fmt::Display;

use thiserror::Error;

/// Exit code 0 is success; each failure class gets its own code so scripts
/// can distinguish operator mistakes from bad data from broken runs.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags or config keys — exit code 2 (matching the argument
    /// parser's own convention).
    #[error("{0}")]
    Usage(String),
    /// Inputs that exist but fail validation, or referenced files that are
    /// missing or malformed — exit code 3.
    #[error("{0}")]
    Validation(String),
    /// Failures while doing the work: output I/O, training divergence,
    /// socket errors — exit code 4.
    #[error("{0}")]
    Runtime(String),
}

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

/// Tags a fallible step as an input-validation question: the path is read
/// or the value checked before any work product exists.
pub fn validation<T, E: Display>(result: Result<T, E>, what: &str) -> Result<T, CliError> {
    result.map_err(|e| CliError::Validation(format!("{what}: {e}")))
}

/// Tags a fallible step as a runtime failure: work was underway.
pub fn runtime<T, E: Display>(result: Result<T, E>, what: &str) -> Result<T, CliError> {
    result.map_err(|e| CliError::Runtime(format!("{what}: {e}")))
}

pub fn usage(message: impl Into<String>) -> CliError {
    CliError::Usage(message.into())
}
