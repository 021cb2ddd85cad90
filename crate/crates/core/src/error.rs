use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Argument outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid model or contract specification.
    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    /// Contract already knocked out at inception, or inconsistent barriers.
    #[error("barrier geometry: {0}")]
    Geometry(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    /// ODE step size underflow.
    #[error("integration failure at lambda={lambda}: {detail}")]
    Integration { lambda: String, detail: String },

    /// Quadrature or series did not settle within its budget.
    #[error("no convergence: {detail} (last estimates {last:?})")]
    Convergence { detail: String, last: Vec<f64> },

    /// Singular or ill-conditioned linear system.
    #[error("degenerate system: {0}")]
    Degenerate(String),

    /// Generic numerical failure (negative probability, NaN, stability).
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    /// True for errors caused by user input rather than by numerics.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Domain(_)
                | Error::InvalidSpec(_)
                | Error::Geometry(_)
                | Error::Dimension(_)
                | Error::Unsupported(_)
        )
    }
}
