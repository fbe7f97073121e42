use deid_core::backends::BackendError;
use deid_core::dataset::DatasetError;
use deid_core::metrics::MetricsError;
use deid_core::orchestrator::RunError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Backend(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Backend(_) => 3,
        }
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::InvalidConfig(m) => CliError::Usage(format!("invalid generator config: {m}")),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        match e {
            BackendError::Config(m) => CliError::Usage(m),
            other => CliError::Backend(other.to_string()),
        }
    }
}

impl From<RunError> for CliError {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Config(m) => CliError::Usage(m),
            e @ RunError::Unavailable { .. } => CliError::Backend(e.to_string()),
            e @ RunError::Pixels { .. } => CliError::Data(e.to_string()),
        }
    }
}
