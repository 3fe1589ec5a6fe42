use thiserror::Error;

/// Errors raised by geometry, flow, semigroup and oracle routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid point: {0}")]
    InvalidPoint(String),

    #[error("tangent vector is not based at the evaluation point")]
    IncompatibleBase,

    #[error("points are beyond the injectivity radius (cut locus)")]
    BeyondInjectivityRadius,

    #[error("manifold {0} is not parallelizable")]
    NotParallelizable(String),

    #[error("vector fields fail to span the tangent space at {at:?} (min singular value {sigma_min:e})")]
    DegenerateFields { at: Vec<f64>, sigma_min: f64 },

    #[error("ODE step limit of {max_steps} exceeded at time {reached} of {target}")]
    StepLimitExceeded { max_steps: usize, reached: f64, target: f64 },

    #[error("M2 must be positive, got {0}")]
    NonpositiveM2(f64),

    #[error("variant incompatible with generator: {0}")]
    VariantIncompatible(String),

    #[error("branch tree needs {needed} leaf evaluations, budget is {budget}")]
    BudgetExceeded { needed: f64, budget: u64 },

    #[error("empty sample")]
    EmptySample,

    #[error("series or quadrature did not converge: {0}")]
    TruncationBudgetExceeded(String),

    #[error("linear system could not be solved: {0}")]
    SingularLinearSystem(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
