use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("non-finite values encountered: {0}")]
    NonFinite(String),

    #[error("rank deficient: {0}")]
    RankDeficient(String),

    #[error("no convergence after {iterations} iterations: {what}")]
    NoConvergence { what: String, iterations: usize },

    #[error("log-likelihood decreased from {before} to {after} at iteration {iteration}")]
    LikelihoodDecrease {
        iteration: usize,
        before: f64,
        after: f64,
    },

    #[error("insufficient excitation: {0}")]
    InsufficientExcitation(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("missing predictor for horizon {0}")]
    MissingPredictor(usize),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Hard numerical failures map to CLI exit code 2.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite(_)
                | Error::NonFinite(_)
                | Error::RankDeficient(_)
                | Error::NoConvergence { .. }
                | Error::LikelihoodDecrease { .. }
                | Error::InsufficientExcitation(_)
                | Error::Numerical(_)
        )
    }
}
