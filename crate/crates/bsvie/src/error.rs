//! Error types shared across the crate.

use thiserror::Error;

/// Which model assumption a validation failure refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum Assumption {
    /// Kernel decay bound.
    KernelDecay,
    /// Driver decay/integrability bound.
    DriverDecay,
    /// Boundedness of the drift coefficient xi.
    XiBounded,
    /// Jump coefficient beta bounded below away from -1.
    BetaLowerBound,
    /// Weighted contraction condition L(lambda) < 1/2.
    Contraction,
    /// Novikov integrability of the measure change.
    Novikov,
}

impl std::fmt::Display for Assumption {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Assumption::KernelDecay => "A1 (kernel decay)",
            Assumption::DriverDecay => "A1 (driver decay)",
            Assumption::XiBounded => "A1 (xi bounded)",
            Assumption::BetaLowerBound => "A1 (beta >= -1 + eps)",
            Assumption::Contraction => "A2 (contraction)",
            Assumption::Novikov => "A3 (Novikov)",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("contraction condition violated: L(lambda) = {l_lambda:.6} >= {limit}")]
    ContractionViolated { l_lambda: f64, limit: f64 },

    #[error("singular triangular system at row {row}, node {node}: pivot = {pivot}")]
    SingularSystem { row: usize, node: usize, pivot: f64 },

    #[error("measure degenerate: 1 + beta = {value} <= 0 at (s, zeta) = ({s}, {zeta})")]
    MeasureDegenerate { s: f64, zeta: f64, value: f64 },

    #[error("Novikov exponent divergent: value {value:.6} with tail estimate {tail:.3e}")]
    Divergent { value: f64, tail: f64 },

    #[error("no convergence after {iterations} iterations (error {error:.3e} > tol {tol:.3e})")]
    NoConvergence {
        iterations: usize,
        error: f64,
        tol: f64,
    },

    #[error("assumption violated: {assumption}: {detail}")]
    AssumptionViolated {
        assumption: Assumption,
        detail: String,
    },

    #[error("regression design matrix rank-deficient even at degree 0")]
    RegressionSingular,

    #[error("instability detected: |X({t:.4})| = {x:.3e} exceeds cap {cap:.3e}")]
    InstabilityDetected { t: f64, x: f64, cap: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
