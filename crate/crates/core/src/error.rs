use thiserror::Error;

/// Errors raised by the estimators, the simulation harness and its I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("design matrix is singular: column `{column}` is collinear with earlier columns")]
    SingularDesign { column: String },

    #[error("logistic regression failed: {0}")]
    Separation(String),

    #[error("fit did not converge: {0}")]
    Convergence(String),

    #[error("posterior mass underflow: {0}; widen the parameter grid")]
    GridUnderflow(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}
