//! Dense constrained least-squares reference solutions.
//!
//! Verification code (the acceptance suite, the CLI `check` battery)
//! compares every gauged pseudo-inverse against this independent route:
//! the singular operator is stacked with its gauge functional as an extra
//! row and the least-squares problem is solved through the normal
//! equations with a Cholesky factorization. No code is shared with the
//! bordered-LU solvers being checked.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Solve `A u = g` subject to `gauge . u = 0` by least squares on the
/// stacked system `[A; gauge^T] u = [g; 0]`.
pub fn constrained_least_squares(
    a: &DMatrix<f64>,
    g: &DVector<f64>,
    gauge: &DVector<f64>,
) -> Result<DVector<f64>> {
    constrained_least_squares_multi(a, g, std::slice::from_ref(gauge))
}

/// Solve `A u = g` subject to `gauge_i . u = 0` for every supplied gauge,
/// by least squares on the stacked system.
///
/// For a consistent `g` (compatible right-hand side) and gauge functionals
/// that together pin the kernel of `A`, the stacked matrix has full column
/// rank and the minimizer is the unique gauged solution.
pub fn constrained_least_squares_multi(
    a: &DMatrix<f64>,
    g: &DVector<f64>,
    gauges: &[DVector<f64>],
) -> Result<DVector<f64>> {
    let n = a.ncols();
    assert_eq!(a.nrows(), g.len());
    let extra = gauges.len();
    let mut stacked = DMatrix::zeros(a.nrows() + extra, n);
    stacked.view_mut((0, 0), (a.nrows(), n)).copy_from(a);
    for (i, gauge) in gauges.iter().enumerate() {
        assert_eq!(gauge.len(), n);
        // Balance each gauge row against the operator scale.
        let scale = a.amax().max(1e-300) / gauge.amax().max(1e-300);
        for j in 0..n {
            stacked[(a.nrows() + i, j)] = gauge[j] * scale;
        }
    }
    let mut rhs = DVector::zeros(a.nrows() + extra);
    rhs.rows_mut(0, a.nrows()).copy_from(g);

    let ata = stacked.transpose() * &stacked;
    let atb = stacked.transpose() * rhs;
    let chol = ata
        .clone()
        .cholesky()
        .ok_or_else(|| Error::SingularSystem("normal equations not SPD in oracle".into()))?;
    let mut u = chol.solve(&atb);
    // One step of iterative refinement on the normal equations keeps the
    // oracle well below the 1e-10 comparison tolerance.
    let resid = &atb - &ata * &u;
    u += chol.solve(&resid);
    Ok(u)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_gauged_solution_of_singular_system() {
        // A = projector complement: A u = u - mean(u) on R^3; kernel =
        // constants; gauge = e_0.
        let n = 3;
        let a = DMatrix::from_fn(n, n, |i, j| {
            (if i == j { 1.0 } else { 0.0 }) - 1.0 / n as f64
        });
        let g = DVector::from_vec(vec![1.0, -1.0, 0.0]); // mean zero
        let gauge = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let u = constrained_least_squares(&a, &g, &gauge).unwrap();
        // u = g + c with gauge.u = 0 => c = -g[0]
        assert!((u[0] - 0.0).abs() < 1e-14);
        assert!((u[1] - (-2.0)).abs() < 1e-14);
        assert!((u[2] - (-1.0)).abs() < 1e-14);
    }
}
