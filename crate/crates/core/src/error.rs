use thiserror::Error;

/// Errors raised by the numerical kernel, the synthesis routines and the CLI.
#[derive(Debug, Error)]
pub enum Error {
    /// Input failed a structural or mathematical precondition.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: String,
        got: String,
    },

    /// An iterative or direct solver failed to produce an acceptable answer.
    #[error("{solver} failed: {reason} (last residual {residual:.3e})")]
    SolverFailure {
        solver: &'static str,
        reason: String,
        residual: f64,
    },

    /// A matrix that must be strictly stable is not.
    #[error("{what} is not strictly stable (spectral radius {radius:.6})")]
    Unstable { what: String, radius: f64 },

    #[error("matrix is not positive semi-definite: smallest eigenvalue {min_eigenvalue:.3e}")]
    NotPsd { min_eigenvalue: f64 },

    /// Optimal-detector quantities need a positive definite attack noise covariance.
    #[error("attack noise covariance Q_a is singular; regularize it (e.g. Q_a + eps*I) before building the optimal detector")]
    SingularAttackNoise,

    #[error("attack is undetectable: divergence {kld:.3e} is not positive")]
    Undetectable { kld: f64 },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("no convergence after {iterations} iterations: {reason}")]
    Convergence { iterations: usize, reason: String },

    #[error("estimation error: {0}")]
    Estimation(String),

    /// Configuration text could not be parsed.
    #[error("parse error{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Parse { line: Option<usize>, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn dims(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Dimension {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) => 1,
            Error::Parse { .. } => 2,
            Error::Validation(_)
            | Error::Dimension { .. }
            | Error::NotPsd { .. }
            | Error::SingularAttackNoise
            | Error::Undetectable { .. } => 3,
            Error::SolverFailure { .. } | Error::Unstable { .. } | Error::Numeric(_) => 4,
            Error::Convergence { .. } | Error::Estimation(_) => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
