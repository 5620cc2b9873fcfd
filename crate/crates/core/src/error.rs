use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("minibatch is empty")]
    EmptyBatch,

    #[error("covariance estimator undefined for batch size {0} (needs at least 2)")]
    EstimatorUndefined(usize),

    #[error("matrix is not symmetric (max defect {0:e})")]
    Asymmetric(f64),

    #[error("matrix is indefinite: eigenvalue {eigenvalue:e} below -{tolerance:e}")]
    Indefinite { eigenvalue: f64, tolerance: f64 },

    #[error("enumeration needs {count:e} outcomes, above the bound {bound}")]
    EnumerationTooLarge { count: f64, bound: u64 },

    #[error("diverged at step {step}: parameter norm {norm:e} exceeds {limit:e}")]
    Diverged { step: usize, norm: f64, limit: f64 },

    #[error("the two drift-correction forms disagree by {defect:e}; Hessian blocks are likely wrong")]
    DriftInconsistency { defect: f64 },

    #[error("inconclusive result: {0}")]
    Inconclusive(String),

    #[error("not stationary: {0}")]
    NotStationary(String),

    #[error("empty sample: {0}")]
    EmptySample(String),

    #[error("oracle unavailable: {0}")]
    OracleUnavailable(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Errors that signal an underpowered or unsettled experiment rather than a fault.
    pub fn is_inconclusive(&self) -> bool {
        matches!(self, Error::Inconclusive(_) | Error::NotStationary(_))
    }
}
