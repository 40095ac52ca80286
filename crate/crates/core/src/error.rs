use mvfuse_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{what} did not converge in {iterations} iterations (last residual {residual:e})")]
    NotConverged { what: &'static str, iterations: usize, residual: f64, trace: Vec<f64> },
    #[error("config error: {0}")]
    Config(String),
    #[error("episode already finished; call reset first")]
    StepAfterDone,
    #[error("non-finite loss during update: {0}")]
    NonFiniteLoss(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

/// Lets model code run inside closures that speak the tensor error type,
/// such as finite-difference checks.
impl From<Error> for mvfuse_tensor::TensorError {
    fn from(e: Error) -> Self {
        match e {
            Error::Tensor(t) => t,
            other => mvfuse_tensor::TensorError::InvalidArgument { op: "model", msg: other.to_string() },
        }
    }
}
