use thiserror::Error;

/// Errors raised by the model, samplers, learner, checker and planner.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("observation history holds {have} of {need} lagged observations")]
    WarmUp { have: usize, need: usize },

    #[error("observation has zero likelihood under every state (normalizer {0:e})")]
    ImpossibleObservation(f64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid belief: {0}")]
    InvalidBelief(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("PCTL syntax error at position {position}: {message}")]
    Parse { position: usize, message: String },

    #[error("path operator not supported for checking: {0}")]
    UnsupportedForChecking(String),

    #[error("empty alpha-vector set")]
    EmptyAlphaSet,

    #[error("missing data: {0}")]
    MissingData(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
