use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("point behind camera {camera} (depth {depth:.4} m) at frame {frame:?}")]
    BehindCamera {
        camera: usize,
        frame: Option<usize>,
        depth: f64,
    },

    #[error("time {t} outside trajectory span [{start}, {end}]")]
    OutOfSpan { t: f64, start: f64, end: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("non-finite loss term `{0}`")]
    NonFinite(&'static str),

    #[error("fit failed: {reason}")]
    FitFailure { reason: String, trace: Vec<f64> },

    #[error("alignment failed: {0}")]
    Alignment(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("scenario rejected: {0}")]
    Scenario(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
