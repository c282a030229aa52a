use thiserror::Error;

use crate::hd_sparse::SparseCoef;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input data or configuration violates a documented precondition.
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("no convergence: {0}")]
    NoConvergence(String),

    /// Alternating (beta, gamma) scheme ran out of sweeps; the last iterate is kept.
    #[error("joint (beta, gamma) fit did not converge after {sweeps} sweeps (last beta = {beta})")]
    JointNotConverged {
        sweeps: usize,
        beta: f64,
        gamma: Box<SparseCoef>,
    },

    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub(crate) fn in_fold(self, fold: usize) -> Self {
        Error::Fold {
            fold,
            source: Box::new(self),
        }
    }

    /// True when the error stems from bad input rather than a numerical breakdown.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Invalid(_) => true,
            Error::Fold { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}
