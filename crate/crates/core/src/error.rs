//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the pipeline.
///
/// Variants are grouped by the exit-code discipline of the CLI: config
/// errors map to exit code 2, data errors to 3, numerical failures to 4.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or arguments rejected before any work starts.
    #[error("config error: {0}")]
    Config(String),

    /// Missing, malformed, or inconsistent data artifacts.
    #[error("data error: {0}")]
    Data(String),

    /// A numerical invariant was violated at runtime.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Exit code for the CLI: 2 config, 3 data, 4 numerical/io.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) => 3,
            Error::Numerical(_) => 4,
            Error::Io(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
