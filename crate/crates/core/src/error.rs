use thiserror::Error;

/// Errors raised across the library. Each variant maps to one failure
/// category reported by the CLI.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("neumann series did not decay after {terms} terms (last term norm {last_norm:.3e}); step size too large")]
    Divergence { terms: usize, last_norm: f64 },

    #[error("oracle failure: {0}")]
    Oracle(String),

    #[error("degenerate instance: {0}")]
    DegenerateInstance(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("training failure: {0}")]
    Training(String),

    #[error("load error at row {row}, column {column}: {message}")]
    Load {
        row: usize,
        column: String,
        message: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short category name used in CLI diagnostics.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidParameter(_) => "invalid-parameter",
            Error::Shape(_) => "shape-error",
            Error::Numeric(_) => "numeric-error",
            Error::Precondition(_) => "precondition-error",
            Error::Divergence { .. } => "divergence-error",
            Error::Oracle(_) => "oracle-error",
            Error::DegenerateInstance(_) => "degenerate-instance",
            Error::InsufficientData(_) => "insufficient-data",
            Error::Training(_) => "training-error",
            Error::Load { .. } => "load-error",
            Error::Config(_) => "config-error",
            Error::Io(_) | Error::Csv(_) | Error::Json(_) => "io-error",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
