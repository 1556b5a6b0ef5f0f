use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Every violated configuration field, one message each.
    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("integration failed at t = {t}: {reason}")]
    Integration { t: f64, reason: String },

    #[error("index {index} out of range (valid {lo}..={hi})")]
    Index { index: usize, lo: usize, hi: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("scaler error: {0}")]
    Scaler(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("training failed at epoch {epoch}: {reason}")]
    Training { epoch: usize, reason: String },

    #[error("non-finite gradient in parameter tensor {tensor} at optimizer step {step}")]
    NonFiniteGradient { tensor: usize, step: u64 },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("QP solver did not converge in {iterations} iterations (projected-gradient residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable category, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Config(_) => "config",
            Error::Integration { .. } => "integration",
            Error::Index { .. } => "index",
            Error::Shape(_) => "shape",
            Error::Scaler(_) => "scaler",
            Error::Parse(_) => "parse",
            Error::Usage(_) => "usage",
            Error::Training { .. } => "training",
            Error::NonFiniteGradient { .. } => "non_finite_gradient",
            Error::UndefinedMetric(_) => "undefined_metric",
            Error::Singular(_) => "singular",
            Error::NonConvergence { .. } => "non_convergence",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
