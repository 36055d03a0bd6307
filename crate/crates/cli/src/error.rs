use std::path::PathBuf;

use memlq_core::MemlqError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read {path}: {source}")]
    FileNotFound {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed JSON: {0}")]
    Parse(String),
    #[error("config does not match the schema: {0}")]
    Schema(String),
    #[error("invalid problem: {0}")]
    Config(MemlqError),
    #[error(transparent)]
    Core(#[from] MemlqError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("thread pool: {0}")]
    Threads(String),
}

impl CliError {
    /// Process exit status: 1 for configuration, 2 for numerical and 3 for
    /// resource failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::FileNotFound { .. }
            | CliError::Parse(_)
            | CliError::Schema(_)
            | CliError::Config(_) => 1,
            CliError::Core(MemlqError::MemoryBudgetExceeded { .. }) => 3,
            CliError::Core(_) => 2,
            CliError::Io { .. } | CliError::Threads(_) => 3,
        }
    }
}
