use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid mask: {0}")]
    InvalidMask(String),

    #[error("infeasible acceleration: target R = {target}, nearest achievable R = {nearest:.4}")]
    InfeasibleAcceleration { target: f64, nearest: f64 },

    #[error("numerical divergence: {0}")]
    NumericalDivergence(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(LabError::InvalidArgument(msg.into()))
}
