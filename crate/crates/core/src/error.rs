use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// An iterative solver did not contract within its iteration cap.
    #[error("{what} did not converge within {iterations} iterations")]
    NonConvergent { what: &'static str, iterations: usize },

    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Matrix or vector dimensions do not agree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A covariance (or other matrix expected to be PSD) is indefinite.
    #[error("cholesky factorization failed: matrix is not positive semidefinite (pivot {pivot} = {value:e})")]
    CholeskyFailure { pivot: usize, value: f64 },

    /// The set is unbounded in the queried direction.
    #[error("set is unbounded in the queried direction")]
    Unbounded,

    /// Tightening removed the origin from the constraint set.
    #[error("tightened face {face} has negative offset {offset:.6} (original {original:.6}, support {support:.6})")]
    EmptyTightening {
        face: usize,
        offset: f64,
        original: f64,
        support: f64,
    },

    /// An active-set or set-recursion loop hit its iteration cap.
    #[error("{what} hit the iteration limit ({limit})")]
    IterationLimit { what: &'static str, limit: usize },

    /// The MPC problem is infeasible at the initial state.
    #[error("MPC problem is infeasible at the initial state")]
    InitialInfeasible,

    /// The backup problem from the previously predicted nominal state failed.
    #[error("backup problem infeasible at step {step}: {detail}")]
    BackupInfeasible { step: usize, detail: String },

    /// A trial of an ensemble failed.
    #[error("trial {trial}: {source}")]
    Trial {
        trial: usize,
        #[source]
        source: Box<Error>,
    },

    /// Invalid configuration.
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
