use compt::datasets::DatasetError;
use compt::model::{CheckpointError, ModelError};
use compt::train::TrainError;

/// `Input` covers anything the user can fix (bad files, flags, configs) and
/// exits with 2; `Internal` exits with 1.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Internal(_) => 1,
        }
    }

    pub fn internal(e: impl std::fmt::Display) -> CliError {
        CliError::Internal(e.to_string())
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Tensor(_) => CliError::Internal(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::EmptyPartition(_) | TrainError::Metric(_) => {
                CliError::Input(e.to_string())
            }
            TrainError::Model(m) => m.into(),
            TrainError::Loss(_) | TrainError::Tensor(_) => CliError::Internal(e.to_string()),
        }
    }
}
