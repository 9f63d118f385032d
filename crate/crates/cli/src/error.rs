//! Command failures and their exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("data: {0}")]
    Data(String),
    #[error("lineage: {0}")]
    Lineage(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Lineage(_) => 4,
        }
    }
}

impl From<tit_core::Error> for CliError {
    fn from(e: tit_core::Error) -> Self {
        match e {
            tit_core::Error::Lineage(m) => CliError::Lineage(m),
            other => CliError::Data(other.to_string()),
        }
    }
}
