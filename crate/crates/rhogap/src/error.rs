//! Crate-wide error type.

use crate::kernels::Hyperparameters;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("insufficient data: need at least {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },

    /// Cholesky factorization failed; the Gram matrix is numerically
    /// indefinite despite the jitter (degenerate hyperparameters or
    /// heavily duplicated inputs).
    #[error("numerical conditioning failure: {0}")]
    NumericalConditioning(String),

    /// All optimizer restarts failed; carries the best parameters seen.
    #[error("hyperparameter fitting failed: {message}")]
    Fitting {
        message: String,
        best: Box<Hyperparameters>,
    },

    /// The performance specification cannot be met at this state for any
    /// amount of training data.
    #[error("performance spec infeasible: xi = {xi:.6e} does not exceed gamma term {gamma_term:.6e}")]
    SpecInfeasible { xi: f64, gamma_term: f64 },

    /// `theta_g` is undefined without a positive lower input bound.
    #[error("no informative lower input bound; g-density unverifiable")]
    NoLowerInputBound,

    /// |mu_g(x)| fell below the decoupling threshold; the linearizing
    /// control input is not trustworthy here.
    #[error("singular decoupling: |mu_g| = {mu_g:.6e} below threshold {threshold:.6e}")]
    SingularDecoupling { mu_g: f64, threshold: f64 },

    /// mu_g(x) must stay positive (the sign of g is known and constant).
    #[error("sign violation: mu_g = {mu_g:.6e} is not positive")]
    SignViolation { mu_g: f64 },

    #[error("training-data generation failed: {0}")]
    DataGeneration(String),

    #[error("integration diverged at t = {t:.6}: non-finite state")]
    Divergence { t: f64 },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed file {path}: {message}")]
    Parse { path: String, message: String },

    /// Wraps an error from one stage of the experiment pipeline.
    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn stage(stage: &'static str, source: Error) -> Self {
        Error::Stage {
            stage,
            source: Box::new(source),
        }
    }

    /// Innermost error of a stage chain.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}
