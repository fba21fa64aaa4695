use std::path::PathBuf;

use shrinknet::ErrorClass;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] shrinknet::Error),

    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot encode JSON: {0}")]
    Encode(#[source] serde_json::Error),

    #[error("cannot encode table: {0}")]
    Table(#[from] csv::Error),

    #[error("invalid arguments: {0}")]
    Usage(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) => match e.class() {
                ErrorClass::Input => 2,
                ErrorClass::Numerical => 3,
                ErrorClass::Config => 4,
            },
            CliError::Write { .. } | CliError::Table(_) => 2,
            CliError::Encode(_) => 3,
            CliError::Usage(_) => 4,
        }
    }
}
