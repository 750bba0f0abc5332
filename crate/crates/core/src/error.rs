use thiserror::Error;

/// Errors raised while loading data, evaluating the likelihood or fitting.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("subject {id}: {msg}")]
    InvalidSubject { id: String, msg: String },

    #[error("invalid model specification: {0}")]
    Spec(String),

    #[error("parameter vector has length {got}, expected {expected}")]
    Length { got: usize, expected: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("subject {id}, class {class}: {msg}")]
    NonFinite { id: String, class: usize, msg: String },

    #[error("covariance matrix not positive definite (subject {id}, class {class})")]
    NotPositiveDefinite { id: String, class: usize },

    #[error("objective not finite when probing coordinate {coord}: {source}")]
    Probe {
        coord: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("objective not finite at the starting point: {0}")]
    InvalidStart(Box<Error>),

    #[error("Hessian could not be made positive definite after {0} inflations")]
    Inflation(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
