use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A precondition of an operation was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A gradient was requested through an op that has no derivative.
    #[error("op `{0}` is not differentiable")]
    UnsupportedOp(&'static str),

    #[error("non-finite gradient produced by op `{op}`")]
    NonFiniteGradient { op: &'static str },

    /// The adaptive controller exhausted its step budget or underflowed.
    #[error("solver diverged at tau={tau} (step size {step_size:e}, {steps} attempted steps)")]
    Divergence {
        tau: f64,
        step_size: f64,
        steps: usize,
        last_state: Vec<f64>,
    },

    #[error("non-finite state at tau={tau}")]
    NonFiniteState { tau: f64 },

    #[error("adjoint state reconstruction did not converge at tau={tau} (residual {residual:e})")]
    Reconstruction { tau: f64, residual: f64 },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Innermost error, skipping context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for numerical failures of the integrators (divergence or NaN/Inf state).
    pub fn is_solver_failure(&self) -> bool {
        matches!(
            self.root(),
            Error::Divergence { .. } | Error::NonFiniteState { .. } | Error::Reconstruction { .. }
        )
    }
}
