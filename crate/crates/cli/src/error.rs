use gethr_core::data::DataError;
use gethr_core::fusionnet::FusionError;
use gethr_core::metrics::MetricError;
use gethr_core::trainer::TrainError;
use thiserror::Error;

/// Failures mapped onto the process exit-code contract.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Diverged(String),
    #[error("{0}")]
    UndefinedMetric(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Failed(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Diverged(_) => 4,
            CliError::UndefinedMetric(_) => 5,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<FusionError> for CliError {
    fn from(e: FusionError) -> Self {
        match e {
            FusionError::Io(_) | FusionError::Format(_) => CliError::Io(e.to_string()),
            FusionError::UnknownTopology(_) | FusionError::MissingModality(_) => CliError::Usage(e.to_string()),
            _ => CliError::Failed(e.to_string()),
        }
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        CliError::UndefinedMetric(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => CliError::Diverged(e.to_string()),
            TrainError::Config(_) | TrainError::EmptySplit(_) => CliError::Usage(e.to_string()),
            TrainError::Metric(m) => m.into(),
            TrainError::Fusion(f) => f.into(),
            _ => CliError::Failed(e.to_string()),
        }
    }
}
