//! Error type shared across the toolkit.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed expression: {0}")]
    MalformedExpression(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("frequency omega_{lambda} is not positive at the initial point (value {value})")]
    NonPositiveFrequencyAtStart { lambda: usize, value: f64 },

    #[error("frequency omega_{lambda} dropped to {value} (floor {floor}) at y = {y:?}")]
    FrequencyNotPositive {
        lambda: usize,
        value: f64,
        floor: f64,
        y: Vec<f64>,
    },

    #[error("domain error: {0}")]
    DomainError(String),

    #[error("angle undefined for fast channel {lambda}: z and zdot both zero")]
    UndefinedAngle { lambda: usize },

    #[error("fixed-point iteration did not converge at t = {t} (residual {residual} after {iters} iterations)")]
    FixedPointDivergence { t: f64, residual: f64, iters: usize },

    #[error("frequencies omega_{lambda} and omega_{mu} are too close to resonance (gap {gap}, tolerance {tol})")]
    ResonanceTooClose {
        lambda: usize,
        mu: usize,
        gap: f64,
        tol: f64,
    },

    #[error("trajectories are on different time grids: {0}")]
    GridMismatch(String),

    #[error("fast subsystem has zero energy; entropy undefined")]
    ZeroFastEnergy,

    #[error("step-size search found no error plateau: {0}")]
    NoPlateau(String),
}

pub type Result<T> = std::result::Result<T, Error>;
