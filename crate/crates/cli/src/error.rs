use sahnet::eval::EvalError;
use sahnet::explain::ExplainError;
use sahnet::net::NetError;
use sahnet::prep::PrepError;
use sahnet::synth::SynthError;
use sahnet::tensor::TensorError;
use sahnet::train::TrainError;
use sahnet::volio::VolioError;
use serde::Serialize;
use thiserror::Error;

/// Failure classes, each with its own process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, unreadable or invalid configuration.
    #[error("{0}")]
    Usage(String),
    /// Missing, malformed or inconsistent input data.
    #[error("{0}")]
    Data(String),
    /// A computation produced non-finite or degenerate values.
    #[error("{0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Serialize)]
struct Report<'a> {
    error: &'a str,
    exit_code: i32,
    message: String,
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Usage(_) => "usage",
            Self::Data(_) => "data",
            Self::Numeric(_) => "numeric",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
            Self::Numeric(_) => 3,
        }
    }

    /// One-line JSON object for stderr.
    pub fn to_json(&self) -> String {
        let r = Report { error: self.kind(), exit_code: self.exit_code(), message: self.to_string() };
        serde_json::to_string(&r).expect("error report serializes")
    }

    pub fn data(context: impl std::fmt::Display, e: impl std::fmt::Display) -> Self {
        Self::Data(format!("{context}: {e}"))
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<VolioError> for CliError {
    fn from(e: VolioError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::NonFiniteScore(_) | EvalError::ZeroVariance => Self::Numeric(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::ConfigInvalid(_) | NetError::SpatialTooSmall(_) => Self::Usage(e.to_string()),
            NetError::Tensor(t) => t.into(),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::ConfigInvalid(_) | TrainError::UnknownMonitor(_) => Self::Usage(e.to_string()),
            TrainError::NonFiniteLoss(_) => Self::Numeric(e.to_string()),
            TrainError::Net(n) => n.into(),
            TrainError::Eval(v) => v.into(),
            TrainError::Tensor(t) => t.into(),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<PrepError> for CliError {
    fn from(e: PrepError) -> Self {
        let mut inner = &e;
        while let PrepError::Stage { source, .. } = inner {
            inner = source;
        }
        match inner {
            PrepError::ConfigInvalid(_) => Self::Usage(e.to_string()),
            PrepError::DegenerateInput(_) | PrepError::InvalidTransform(_) => Self::Numeric(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<ExplainError> for CliError {
    fn from(e: ExplainError) -> Self {
        match e {
            ExplainError::UnknownLayer(_) | ExplainError::NotConvolutional(_) | ExplainError::UnknownClass(..) => {
                Self::Usage(e.to_string())
            }
            ExplainError::Net(n) => n.into(),
            ExplainError::Tensor(t) => t.into(),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::ConfigInvalid(_) => Self::Usage(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}
