use thiserror::Error;

/// Errors produced by the form calculus and the derived solvers.
#[derive(Debug, Error)]
pub enum LqpError {
    #[error("degree mismatch: {0}")]
    DegreeMismatch(String),

    #[error("domain mismatch: {0}")]
    DomainMismatch(String),

    #[error("invalid exponent: {0}")]
    InvalidExponent(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty mu interval: 1/p - 1/q = {gap} <= 1/n = {critical}; no admissible grading exponent")]
    EmptyMuInterval { gap: f64, critical: f64 },

    #[error("exponents outside the bounded-primitive range: 1/p - 1/q = {gap} > 1/n = {critical}; compare the ball nonvanishing witness")]
    ExponentsNotAdmissible { gap: f64, critical: f64 },

    #[error("root finder failed to converge on [{lo}, {hi}] (residual {residual})")]
    RootFind { lo: f64, hi: f64, residual: f64 },

    #[error("iteration did not converge: {0}")]
    NonConvergence(String),

    #[error("source term is obstructed: {0}")]
    Obstructed(String),

    #[error("singular jacobian at node {0:?}")]
    SingularJacobian(Vec<f64>),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}
