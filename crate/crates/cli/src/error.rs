use std::fmt;

use trajformer::checkpoint::CheckpointError;
use trajformer::data::DataError;
use trajformer::eval::EvalError;
use trajformer::train::TrainError;
use trajformer::Error;

/// Failure classes, each with its own exit status.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Train(TrainError::NonFinite { .. }) | Error::Tensor(_) => CliError::Numeric(msg),
            Error::Train(TrainError::Config(_))
            | Error::Data(DataError::Config(_))
            | Error::Checkpoint(
                CheckpointError::ConfigMismatch(_) | CheckpointError::Scalar { .. },
            )
            | Error::Eval(
                EvalError::NotCausal | EvalError::Horizon { .. } | EvalError::PatchedInfill,
            ) => CliError::Usage(msg),
            _ => CliError::Data(msg),
        }
    }
}

macro_rules! via_core {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                Error::from(e).into()
            }
        })*
    };
}

via_core!(
    TrainError,
    DataError,
    EvalError,
    CheckpointError,
    trajformer::geo::GeoError,
    trajformer::tensor::TensorError
);
