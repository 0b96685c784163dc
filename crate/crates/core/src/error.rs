use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not symmetric (asymmetry {asymmetry:.3e} > tol {tol:.3e})")]
    NotSymmetric { asymmetry: f64, tol: f64 },

    #[error("matrix is not positive semidefinite (eigenvalue {eigenvalue:.3e})")]
    NotPsd { eigenvalue: f64 },

    #[error("matrix is not positive definite (min eigenvalue {eigenvalue:.3e})")]
    NotPositiveDefinite { eigenvalue: f64 },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("reference infeasible at t = {t:.6e} s: {reason}")]
    ReferenceInfeasible { t: f64, reason: String },

    #[error("simulation diverged at t = {t:.6e} s")]
    Divergence { t: f64 },

    #[error("window does not span an integer number of periods ({periods:.9} periods)")]
    NonIntegerWindow { periods: f64 },

    #[error("undefined metric: {0}")]
    Undefined(String),
}

impl Error {
    pub(crate) fn param(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }

    /// True for failures of the numerical run itself (as opposed to bad input).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Divergence { .. } | Error::ReferenceInfeasible { .. }
        )
    }
}
