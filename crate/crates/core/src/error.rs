use thiserror::Error;

pub type Result<T> = std::result::Result<T, CovmcError>;

#[derive(Debug, Error)]
pub enum CovmcError {
    #[error("duplicate entry at ({row}, {col})")]
    DuplicateEntry { row: usize, col: usize },

    #[error("index ({row}, {col}) out of range for a {n}x{m} matrix")]
    IndexOutOfRange { row: usize, col: usize, n: usize, m: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("logistic fit is separated or its Hessian is singular: {0}")]
    Separation(String),

    #[error("{what} did not converge after {iterations} iterations")]
    NonConvergence { what: &'static str, iterations: usize },

    #[error("column {0} has a rank-deficient design among its observed rows")]
    RankDeficientColumn(usize),

    #[error("rank {rank} exceeds min(n, m) = {max}")]
    RankTooLarge { rank: usize, max: usize },

    #[error("degenerate plug-in moments: {0}")]
    DegenerateMoments(String),

    #[error("contrast group is empty")]
    EmptyGroup,

    #[error("evaluation split is empty")]
    EmptySplit,

    #[error("unknown category {value:?} for {field}")]
    UnknownCategory { field: &'static str, value: String },

    #[error("I/O error")]
    Io(#[from] std::io::Error),

    #[error("CSV error")]
    Csv(#[from] csv::Error),

    #[error("JSON error")]
    Json(#[from] serde_json::Error),
}

/// Coarse failure class, used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Data,
    Numerical,
}

impl CovmcError {
    pub fn class(&self) -> ErrorClass {
        match self {
            CovmcError::Separation(_)
            | CovmcError::NonConvergence { .. }
            | CovmcError::RankDeficientColumn(_)
            | CovmcError::DegenerateMoments(_) => ErrorClass::Numerical,
            _ => ErrorClass::Data,
        }
    }
}
