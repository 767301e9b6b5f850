use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid panel: {0}")]
    InvalidPanel(String),

    #[error("invalid event design: {0}")]
    InvalidDesign(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("non-degenerate variation required: {0}")]
    Degenerate(String),

    #[error("optimizer failed to converge after {restarts} starts (best gradient norm {grad_norm:.3e})")]
    NoConvergence { restarts: usize, grad_norm: f64, best: Box<crate::qmle::QmleResult> },

    #[error("invalid restriction: {0}")]
    InvalidRestriction(String),

    #[error("unbalanced panel, missing cells: {0}")]
    Unbalanced(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("too many failed replications in design {design}: {failed} of {total}")]
    TooManyFailures { design: String, failed: usize, total: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
