use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("value iteration did not converge in {iterations} iterations (last residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("factorization failed for {context} (condition estimate {condition:e})")]
    Singular { context: String, condition: f64 },

    #[error("lasso did not converge in {sweeps} sweeps (kkt violation {kkt_violation:e})")]
    LassoMaxIter { sweeps: usize, kkt_violation: f64 },

    #[error("solver failure at iteration {tau}, task {task}: {source}")]
    Engine {
        tau: usize,
        task: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("empty report input: {0}")]
    EmptyReport(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Solver failures (as opposed to bad inputs) map to a distinct CLI exit code.
    pub fn is_solver_failure(&self) -> bool {
        matches!(
            self,
            Error::NotConverged { .. }
                | Error::Singular { .. }
                | Error::LassoMaxIter { .. }
                | Error::Engine { .. }
        )
    }

    pub(crate) fn at(self, tau: usize, task: usize) -> Error {
        Error::Engine {
            tau,
            task,
            source: Box::new(self),
        }
    }
}
