use kslab::LabError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Lab(#[from] LabError),

    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },

    #[error("missing {0}")]
    Missing(String),

    #[error("training diverged at iteration {iteration} (last finite iteration: {last_finite}): {detail}")]
    Divergence { iteration: usize, last_finite: String, detail: String },
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    /// 0 success, 1 usage, 2 infeasible mask, 3 IO or format, 4 missing
    /// artifact, 5 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Lab(e) => match e {
                LabError::InfeasibleAcceleration { .. } => 2,
                LabError::Io(_) | LabError::Format(_) => 3,
                LabError::NumericalDivergence(_) => 5,
                LabError::InvalidArgument(_) | LabError::InvalidMask(_) => 1,
            },
            CliError::Io { .. } => 3,
            CliError::Missing(_) => 4,
            CliError::Divergence { .. } => 5,
        }
    }
}

pub fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

/// Attaches `path` to IO errors.
pub fn io_at<T>(path: &std::path::Path, r: std::io::Result<T>) -> CliResult<T> {
    r.map_err(|source| CliError::Io { path: path.display().to_string(), source })
}
