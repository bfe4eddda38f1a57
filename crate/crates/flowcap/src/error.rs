//! Crate-wide error type.

/// Errors produced by tensor math, solvers, model I/O, and experiment drivers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("integration produced a non-finite state at step {step} of {steps}")]
    DivergedAt { step: usize, steps: usize },

    #[error("fixed-point inversion did not converge: residual {residual:e} after {iters} iterations")]
    NoConvergence { residual: f64, iters: usize },

    #[error("field is already autonomous")]
    AlreadyAutonomous,

    #[error("homeomorphism '{0}' has no registered inverse")]
    MissingInverse(String),

    #[error("state is off the embedding trajectory bundle: {0}")]
    OffBundle(String),

    #[error("unknown homeomorphism '{name}'; available: {available}")]
    UnknownHomeomorphism { name: String, available: String },

    #[error("unknown experiment '{name}'; available: {available}")]
    UnknownExperiment { name: String, available: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("model file error: {0}")]
    ModelFormat(String),

    #[error("training diverged (non-finite loss) at epoch {0}")]
    TrainingDiverged(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
