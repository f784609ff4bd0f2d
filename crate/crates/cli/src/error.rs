use mapo_lab::experiment::ExperimentError;
use mapo_lab::metrics::MetricsError;
use mapo_lab::objectives::ObjectiveError;
use mapo_lab::tasks::{DatasetError, TaskError};
use mapo_lab::train::{CheckpointError, TrainError};
use thiserror::Error;

/// Failure classes with stable process exit codes.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("run aborted: {0}")]
    Runtime(String),
    #[error("i/o or integrity error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<TaskError> for CliError {
    fn from(e: TaskError) -> Self {
        match e {
            TaskError::InvalidTask(_) | TaskError::UnknownCondition(_) | TaskError::EmptyRequest => {
                CliError::Config(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<ObjectiveError> for CliError {
    fn from(e: ObjectiveError) -> Self {
        match e {
            ObjectiveError::InvalidConfig(_) => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::TooFewSamples { .. } => CliError::Config(e.to_string()),
            MetricsError::Csv(_) | MetricsError::Json(_) => CliError::Io(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(_) | TrainError::TaskMismatch => CliError::Config(e.to_string()),
            TrainError::FingerprintMismatch => CliError::Io(e.to_string()),
            TrainError::NonFinite { .. } => CliError::Runtime(e.to_string()),
            TrainError::Objective(inner) => inner.into(),
            TrainError::Metrics(inner) => inner.into(),
            TrainError::Checkpoint(inner) => inner.into(),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Config(_) => CliError::Config(e.to_string()),
            ExperimentError::Io { .. }
            | ExperimentError::Results(_)
            | ExperimentError::Csv(_)
            | ExperimentError::Json(_) => CliError::Io(e.to_string()),
            ExperimentError::Task(inner) => inner.into(),
            ExperimentError::Dataset(inner) => inner.into(),
            ExperimentError::Diffusion(inner) => CliError::Runtime(inner.to_string()),
            ExperimentError::Train(inner) => inner.into(),
            ExperimentError::Metrics(inner) => inner.into(),
            ExperimentError::Checkpoint(inner) => inner.into(),
        }
    }
}
