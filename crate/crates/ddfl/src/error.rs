use crate::decision::{KktResiduals, KktSolution};

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{context}: expected dimension {expected}, got {got}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("constraints are infeasible (smallest achievable violation {violation:.3e})")]
    Infeasible { violation: f64 },

    #[error(
        "solver stopped after {iterations} iterations without reaching tolerance \
         (stationarity {stationarity:.3e}, primal {primal:.3e}, dual {dual:.3e}, \
         complementarity {complementarity:.3e})"
    )]
    NonConvergence {
        iterations: usize,
        stationarity: f64,
        primal: f64,
        dual: f64,
        complementarity: f64,
        /// Best iterate seen, with its residuals; callers that can tolerate a
        /// loose solve may still use it.
        best: Box<(KktSolution, KktResiduals)>,
    },

    #[error(
        "KKT matrix is numerically singular even with Tikhonov shift {regularization:.1e}"
    )]
    DegenerateKkt { regularization: f64 },

    #[error("line {line}: {message}")]
    CsvParse { line: usize, message: String },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    #[error("covariance in {context} is not positive definite")]
    CovarianceNotPd { context: String },

    #[error("cosine similarity is undefined for a zero vector")]
    ZeroVector,

    #[error("checkpoint is corrupt: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("predictor family mismatch: loss `{loss}` requires a {expected} predictor")]
    FamilyMismatch {
        loss: String,
        expected: &'static str,
    },

    #[error("training step {step}: {source}")]
    TrainingStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(context: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
            expected,
            got,
        }
    }
}
