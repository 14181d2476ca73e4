use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum MirError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {what} (expected {expected}, found {found})")]
    Dimension {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("non-finite attribute value for k={k}, t={t}, i={i}")]
    NonFiniteAttribute { k: usize, t: usize, i: usize },

    #[error("actor {actor} has no neighbours in period {t} (zero row in similarity matrix)")]
    IsolatedActor { actor: usize, t: usize },

    #[error("Delta_t(lambda) is numerically singular in period {t}")]
    Singular { t: usize },

    #[error("degenerate response: profiled variance is zero")]
    DegenerateResponse,

    #[error("design matrix is rank deficient: {0}")]
    RankDeficient(String),

    #[error("regime error: {0}")]
    Regime(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("study failed: {failed} of {total} replications failed")]
    StudyFailed { failed: usize, total: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, MirError>;
