use slc_core::CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("missing counterparts for {} stem(s): {}", .0.len(), .0.join(", "))]
    MissingFiles(Vec<String>),
    #[error("gradient check failed for: {}", .0.join(", "))]
    GradcheckFailed(Vec<String>),
}

impl CliError {
    /// 0 success, 1 usage/config/data error, 2 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(CoreError::NumericalAbort { .. }) | CliError::GradcheckFailed(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
