use std::fmt;
use std::process::ExitCode;

use sentiment_core::baseline::BaselineError;
use sentiment_core::ingest::IngestError;
use sentiment_core::model::ModelError;
use sentiment_core::train::{ArtifactError, PredictError, TrainError};
use sentiment_core::TensorError;

/// A failed command, classified by exit status.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags or configuration values. Exit 2.
    Usage(String),
    /// Unreadable, unwritable or malformed files and data. Exit 3.
    Data(String),
    /// Non-finite values or divergence during training. Exit 4.
    Numeric(String),
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Failure::Usage(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Failure::Data(msg.into())
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            Failure::Usage(_) => 2,
            Failure::Data(_) => 3,
            Failure::Numeric(_) => 4,
        })
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Data(m) => write!(f, "input/output error: {m}"),
            Failure::Numeric(m) => write!(f, "numeric error: {m}"),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<IngestError> for Failure {
    fn from(e: IngestError) -> Self {
        match e {
            IngestError::BadFractions(_) | IngestError::SampleTooLarge { .. } | IngestError::MissingColumn(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

fn from_tensor(e: TensorError) -> Failure {
    match e {
        TensorError::NonFinite(_) => Failure::Numeric(e.to_string()),
        _ => Failure::Data(e.to_string()),
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidConfig(m) => Failure::Usage(m),
            ModelError::Tensor(t) => from_tensor(t),
            other => Failure::Data(other.to_string()),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(m) => Failure::Usage(m),
            TrainError::NonFiniteLoss { .. } | TrainError::NonFiniteGradient(_) => Failure::Numeric(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Tensor(t) => from_tensor(t),
            TrainError::EmptyClass(_) | TrainError::EmptySplit(_) => Failure::Data(e.to_string()),
        }
    }
}

impl From<ArtifactError> for Failure {
    fn from(e: ArtifactError) -> Self {
        Failure::Data(format!("model artifact: {e}"))
    }
}

impl From<PredictError> for Failure {
    fn from(e: PredictError) -> Self {
        match e {
            PredictError::EmptyText => Failure::Data(e.to_string()),
            PredictError::Model(m) => m.into(),
        }
    }
}

impl From<BaselineError> for Failure {
    fn from(e: BaselineError) -> Self {
        match e {
            BaselineError::Diverged { .. } => Failure::Numeric(e.to_string()),
            BaselineError::InvalidK(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}
