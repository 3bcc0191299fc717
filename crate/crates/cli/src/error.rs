use molgap::{CacheError, DatasetError, EnsembleError, FeatureError, GraphError, ModelError, ParamError, TrainError};

/// Command failure, classified by exit status.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(format!("I/O: {e}"))
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        }
    )*};
}

data_error!(DatasetError, CacheError, GraphError, FeatureError, ParamError);

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(m) => m.into(),
            TrainError::NonFiniteLoss { .. } | TrainError::NonFiniteGrad => CliError::Numerical(e.to_string()),
            TrainError::Config(_) | TrainError::Fold { .. } | TrainError::FoldCount { .. } => {
                CliError::Usage(e.to_string())
            }
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<EnsembleError> for CliError {
    fn from(e: EnsembleError) -> Self {
        match e {
            EnsembleError::NonFinite { .. }
            | EnsembleError::Entry {
                source: ModelError::NonFinite { .. },
                ..
            } => CliError::Numerical(e.to_string()),
            e => CliError::Data(e.to_string()),
        }
    }
}
