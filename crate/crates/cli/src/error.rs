//! Errors carrying the process exit code.

use std::fmt;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration, flags, or input files; exits 2.
    Input(String),
    /// Unexpected failures such as unwritable outputs; exits 1.
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Internal(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m) | CliError::Internal(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

/// Wrap anything printable as an input error.
pub fn input(e: impl fmt::Display) -> CliError {
    CliError::Input(e.to_string())
}

/// Wrap anything printable as an internal error.
pub fn internal(e: impl fmt::Display) -> CliError {
    CliError::Internal(e.to_string())
}
