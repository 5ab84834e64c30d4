//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
///
/// Solver-facing variants carry the measured defect so callers can tell a
/// modeling error (a genuinely incompatible right-hand side, a drift kernel)
/// from roundoff that merely exceeded a tolerance.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid spec: {0}")]
    GridSpec(String),

    #[error("invalid kernel spec: {0}")]
    KernelSpec(String),

    #[error("kernel positivity violated: {what} (min = {min:.3e})")]
    PositivityViolation { what: String, min: f64 },

    #[error("kernel symmetry violated: {what} (defect = {defect:.3e}, tol = {tol:.3e})")]
    SymmetryViolation { what: String, defect: f64, tol: f64 },

    /// Fredholm-alternative failure: the right-hand side has a component in
    /// the cokernel of the operator being inverted. The `moment` names the
    /// integral that failed to vanish.
    #[error("compatibility violation: {moment} = {defect:.3e} exceeds tol {tol:.3e}")]
    CompatibilityViolation {
        moment: String,
        defect: f64,
        tol: f64,
    },

    #[error("range violation for {operator}: defect {defect:.3e} exceeds tol {tol:.3e}")]
    RangeViolation {
        operator: String,
        defect: f64,
        tol: f64,
    },

    #[error("bordered system is singular: {0}")]
    SingularSystem(String),

    #[error("collision operator at y-index {y_index} has non-positive spectral gap {gap:.3e}")]
    NonPositiveGap { y_index: usize, gap: f64 },

    #[error("numerical kernel of {operator} is not one-dimensional: \
             smallest singular values {sigma_min:.3e} and {sigma_next:.3e}")]
    KernelNotSimple {
        operator: String,
        sigma_min: f64,
        sigma_next: f64,
    },

    #[error("computed equilibrium for {operator} changes sign (min = {min:.3e}, max = {max:.3e})")]
    NonPositive {
        operator: String,
        min: f64,
        max: f64,
    },

    #[error("ellipticity failure: sym D(y) has eigenvalue {min_eig:.3e} at y-index {y_index}")]
    EllipticityFailure { y_index: usize, min_eig: f64 },

    #[error("diffusion tensor is not positive definite (min eigenvalue of sym part {min_eig:.3e})")]
    IndefiniteTensor { min_eig: f64 },

    #[error("iterative solver stalled: relative residual {residual:.3e} after {iterations} iterations")]
    SolverStall { residual: f64, iterations: usize },

    #[error("macro grid resolves each heterogeneity cell with {points_per_cell} points, \
             below the configured minimum {minimum}")]
    ResolutionError {
        points_per_cell: usize,
        minimum: usize,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialization(String),
}

pub type Result<T> = std::result::Result<T, Error>;
