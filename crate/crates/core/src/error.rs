use nalgebra::DVector;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid shard: {0}")]
    InvalidShard(String),

    #[error("response y[{index}] = {value} is not in {{0, 1}}")]
    NonBinaryResponse { index: usize, value: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(
        "solver did not converge after {iterations} iterations (gradient sup-norm {grad_norm:e})"
    )]
    NonConvergence {
        iterations: usize,
        grad_norm: f64,
        last: DVector<f64>,
    },

    #[error("Hessian is singular or indefinite (min eigenvalue {min_eigenvalue:e})")]
    SingularHessian { min_eigenvalue: f64 },

    #[error("worker {index}: {message}")]
    Worker { index: usize, message: String },

    #[error("iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("operation not supported by this transport: {0}")]
    Unsupported(&'static str),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Wraps `self` with the worker index it came from, unless it already names one.
    pub(crate) fn at_worker(self, index: usize) -> Error {
        match self {
            e @ Error::Worker { .. } => e,
            other => Error::Worker {
                index,
                message: other.to_string(),
            },
        }
    }

    pub(crate) fn at_iteration(self, iteration: usize) -> Error {
        Error::Iteration {
            iteration,
            source: Box::new(self),
        }
    }
}
