use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent or invalid configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an operation's precondition (shapes, missing labels, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Divergence { epoch: usize, reason: String },

    #[error("learning-rate search failed: every grid point diverged ({0})")]
    SearchFailed(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    /// The signal has zero residual variance.
    #[error("degenerate signal: {0}")]
    DegenerateSignal(String),

    /// A metric is undefined for the given input (e.g. a single class).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("degenerate spread: {0}")]
    DegenerateSpread(String),

    /// Malformed input data; `line` is 1-based and counts the header.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("pain score out of range [0, 10] at lines {lines:?}")]
    PainOutOfRange { lines: Vec<usize> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
