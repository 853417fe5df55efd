use thiserror::Error;

/// Crate-wide error type. Variants carry the quantity that tripped the guard
/// so callers can report actionable diagnostics.
#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("quadrature failed to converge: {detail} (error estimate {err_est:e})")]
    QuadratureNonConvergence { detail: String, err_est: f64 },

    #[error("collision step too large: dt * S_n * scale = {dt_rate} exceeds 0.5")]
    StepTooLarge { dt_rate: f64 },

    #[error("degenerate collision axis (relative velocity too small to normalize)")]
    DegenerateAxis,

    #[error("leading eigenvalue is not simple (separation {sep:e} below {tol:e})")]
    NonSimpleLeading { sep: f64, tol: f64 },

    #[error("leading eigenvalue has non-negligible imaginary part {imag:e}")]
    ComplexLeading { imag: f64 },

    #[error("eigenpair residual {res:e} exceeds tolerance {tol:e}")]
    EigenResidual { res: f64, tol: f64 },

    #[error("ODE integrator failed: {0}")]
    OdeFailure(String),

    #[error("characteristic-function grids do not match (ids {a:#x} vs {b:#x})")]
    GridMismatch { a: u64, b: u64 },

    #[error("initial data have unequal means: low-k divergence detected at t = 0")]
    UnequalMeans,

    #[error("envelope hypothesis fails at t = 0: {0}")]
    HypothesisFails(String),

    #[error("interpolation requested outside the grid: |k| = {radius} not in [{kmin}, {kmax}]")]
    InterpolationOutOfRange { radius: f64, kmin: f64, kmax: f64 },

    #[error("no convergence: successive-snapshot distance plateaued at {plateau:e}")]
    NoConvergence { plateau: f64 },

    #[error("parameters outside the admissible region: {0}")]
    NonAdmissible(String),

    #[error("decay rate unresolvable: only {usable} points above the noise floor")]
    RateUnresolvable { usable: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("malformed snapshot file: {0}")]
    BadSnapshot(String),
}

pub type Result<T> = std::result::Result<T, Error>;
