//! Per-cell-point collision operators and their constrained pseudo-inverses.
//!
//! At each cell point `y` the collision operator acts on velocity-sampled
//! functions as
//!
//! ```text
//! Q f(v)  = Sigma(y,v) f(v) - int sigma(y,v',v) f(v') dnu(v')
//! Q* g(v) = Sigma(y,v) g(v) - int sigma(y,v,v') g(v') dnu(v')
//! ```
//!
//! `Q` annihilates the local equilibrium `psi(y,.)`, `Q*` annihilates
//! `psi_star`, and the pair is adjoint under the `dnu` inner product (this
//! is exact for the discrete matrices, not just to roundoff tolerance).
//!
//! Pseudo-inverses are realized as bordered (saddle-point) solves: the
//! kernel direction is appended as an extra column, the gauge as an extra
//! row. The Lagrange multiplier of that system *is* the compatibility
//! defect, so defect subtraction costs nothing and violations above
//! `tol_compat` surface as typed errors.

use crate::error::{Error, Result};
use crate::fields::{self, CellField};
use crate::grids::{CellGrid, VelocityGrid};
use crate::kernel::ScatteringKernel;
use nalgebra::linalg::LU;
use nalgebra::{DMatrix, DVector, Dyn};
use rayon::prelude::*;

/// Default threshold separating roundoff-level compatibility defects
/// (silently projected out) from modeling errors (raised).
pub const DEFAULT_TOL_COMPAT: f64 = 1e-11;

/// One collision operator, pinned to a cell point.
#[derive(Debug, Clone)]
pub struct CollisionOperator {
    pub y_index: usize,
    pub matrix: DMatrix<f64>,
    pub adjoint: bool,
}

impl CollisionOperator {
    pub fn apply(&self, f: &DVector<f64>) -> DVector<f64> {
        &self.matrix * f
    }
}

/// The full bank of per-cell-point operators, local equilibria, and
/// prefactored bordered systems. Immutable after assembly; solves are safe
/// to run concurrently.
pub struct CollisionBank {
    pub kernel: ScatteringKernel,
    /// Local equilibrium `psi(y,v)`: per-y kernel of `Q`, positive,
    /// normalized to `int psi psi_star dnu = 1`, exactly parity-symmetric.
    pub psi: CellField,
    q: Vec<DMatrix<f64>>,
    qstar: Vec<DMatrix<f64>>,
    lu_q: Vec<LU<f64, Dyn, Dyn>>,
    lu_qstar: Vec<LU<f64, Dyn, Dyn>>,
    pub tol_compat: f64,
}

fn collision_matrices(kernel: &ScatteringKernel, j: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let nv = kernel.n_v();
    let vg = &kernel.velocity;
    let s = &kernel.sigma[j];
    let q = DMatrix::from_fn(nv, nv, |k, i| {
        let diag = if k == i { kernel.sigma_total[(j, k)] } else { 0.0 };
        diag - vg.weight(i) * s[(i, k)]
    });
    let qs = DMatrix::from_fn(nv, nv, |k, i| {
        let diag = if k == i { kernel.sigma_total[(j, k)] } else { 0.0 };
        diag - vg.weight(i) * s[(k, i)]
    });
    (q, qs)
}

/// Extract the one-dimensional kernel of a small matrix by SVD: returns the
/// right singular vector of the smallest singular value after checking the
/// smallest two are separated by `sep_factor`.
pub fn null_vector(m: &DMatrix<f64>, operator: &str, sep_factor: f64) -> Result<DVector<f64>> {
    let svd = m.clone().svd(false, true);
    let sv = &svd.singular_values;
    let mut idx: Vec<usize> = (0..sv.len()).collect();
    idx.sort_by(|&a, &b| sv[a].partial_cmp(&sv[b]).unwrap());
    let (smin, snext) = (sv[idx[0]], sv[idx[1]]);
    if snext < sep_factor * smin {
        return Err(Error::KernelNotSimple {
            operator: operator.into(),
            sigma_min: smin,
            sigma_next: snext,
        });
    }
    let vt = svd.v_t.expect("requested V^T");
    Ok(vt.row(idx[0]).transpose())
}

/// Solve the kernel of `Q(y)` at every cell point: the local equilibrium.
///
/// Fails with [`Error::KernelNotSimple`] when the numerical kernel is not
/// one-dimensional (the discrete signature of a Krein-Rutman violation) and
/// with [`Error::NonPositive`] when the kernel vector changes sign.
pub fn solve_psi(kernel: &ScatteringKernel) -> Result<CellField> {
    let nv = kernel.n_v();
    let ny = kernel.n_y();
    let vg = &kernel.velocity;
    let columns: Vec<DVector<f64>> = (0..ny)
        .into_par_iter()
        .map(|j| {
            let (q, _) = collision_matrices(kernel, j);
            let mut u = null_vector(&q, &format!("Q at y-index {j}"), 1e6)?;
            let pairing: f64 = (0..nv)
                .map(|k| vg.weight(k) * u[k] * kernel.psi_star[k])
                .sum();
            if pairing < 0.0 {
                u = -u;
            }
            let (mn, mx) = (u.min(), u.max());
            if mn <= 0.0 {
                return Err(Error::NonPositive {
                    operator: format!("Q kernel at y-index {j}"),
                    min: mn,
                    max: mx,
                });
            }
            Ok(u)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut psi = CellField::from_fn(ny, nv, |j, k| columns[j][k]);
    // Average over the parity group, then renormalize per cell point so the
    // pairing with psi_star is exactly one.
    psi = fields::symmetrize(&psi, fields::Parity::EvenV, &kernel.maps);
    psi = fields::symmetrize(&psi, fields::Parity::EvenY, &kernel.maps);
    for j in 0..ny {
        let pairing: f64 = (0..nv)
            .map(|k| vg.weight(k) * psi[(j, k)] * kernel.psi_star[k])
            .sum();
        for k in 0..nv {
            psi[(j, k)] /= pairing;
        }
    }
    Ok(psi)
}

fn bordered(m: &DMatrix<f64>, column: &DVector<f64>, gauge: &DVector<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let mut b = DMatrix::zeros(n + 1, n + 1);
    b.view_mut((0, 0), (n, n)).copy_from(m);
    for i in 0..n {
        b[(i, n)] = column[i];
        b[(n, i)] = gauge[i];
    }
    b
}

impl CollisionBank {
    pub fn new(kernel: ScatteringKernel) -> Result<Self> {
        Self::with_tolerance(kernel, DEFAULT_TOL_COMPAT)
    }

    pub fn with_tolerance(kernel: ScatteringKernel, tol_compat: f64) -> Result<Self> {
        let psi = solve_psi(&kernel)?;
        let ny = kernel.n_y();
        let nv = kernel.n_v();
        let vg = kernel.velocity.clone();
        let mats: Vec<(DMatrix<f64>, DMatrix<f64>)> =
            (0..ny).map(|j| collision_matrices(&kernel, j)).collect();
        let lus: Vec<(LU<f64, Dyn, Dyn>, LU<f64, Dyn, Dyn>)> = mats
            .par_iter()
            .enumerate()
            .map(|(j, (q, qs))| {
                let psi_j = DVector::from_fn(nv, |k, _| psi[(j, k)]);
                let gauge_star = DVector::from_fn(nv, |k, _| vg.weight(k) * kernel.psi_star[k]);
                let gauge_psi = DVector::from_fn(nv, |k, _| vg.weight(k) * psi[(j, k)]);
                let bq = bordered(q, &psi_j, &gauge_star);
                let bqs = bordered(qs, &kernel.psi_star.clone(), &gauge_psi);
                (LU::new(bq), LU::new(bqs))
            })
            .collect();
        let (lu_q, lu_qstar): (Vec<_>, Vec<_>) = lus.into_iter().unzip();
        let (q, qstar): (Vec<_>, Vec<_>) = mats.into_iter().unzip();
        Ok(Self {
            kernel,
            psi,
            q,
            qstar,
            lu_q,
            lu_qstar,
            tol_compat,
        })
    }

    pub fn velocity(&self) -> &VelocityGrid {
        &self.kernel.velocity
    }

    pub fn cell(&self) -> &CellGrid {
        &self.kernel.cell
    }

    pub fn operator(&self, y_index: usize) -> CollisionOperator {
        CollisionOperator {
            y_index,
            matrix: self.q[y_index].clone(),
            adjoint: false,
        }
    }

    pub fn adjoint_operator(&self, y_index: usize) -> CollisionOperator {
        CollisionOperator {
            y_index,
            matrix: self.qstar[y_index].clone(),
            adjoint: true,
        }
    }

    pub fn q_matrix(&self, y_index: usize) -> &DMatrix<f64> {
        &self.q[y_index]
    }

    pub fn qstar_matrix(&self, y_index: usize) -> &DMatrix<f64> {
        &self.qstar[y_index]
    }

    pub fn apply_q(&self, y_index: usize, f: &DVector<f64>) -> DVector<f64> {
        &self.q[y_index] * f
    }

    pub fn apply_qstar(&self, y_index: usize, f: &DVector<f64>) -> DVector<f64> {
        &self.qstar[y_index] * f
    }

    fn pinv_impl(
        &self,
        y_index: usize,
        g: &DVector<f64>,
        adjoint: bool,
    ) -> Result<DVector<f64>> {
        let nv = g.len();
        let vg = self.velocity();
        let mut rhs = DVector::zeros(nv + 1);
        rhs.rows_mut(0, nv).copy_from(g);
        let lu = if adjoint {
            &self.lu_qstar[y_index]
        } else {
            &self.lu_q[y_index]
        };
        let sol = lu.solve(&rhs).ok_or_else(|| {
            Error::SingularSystem(format!(
                "bordered collision solve at y-index {y_index} (adjoint = {adjoint})"
            ))
        })?;
        let defect = sol[nv];
        let scale = fields::norm_v(g, vg).max(f64::MIN_POSITIVE);
        if defect.abs() > self.tol_compat * scale {
            let moment = if adjoint {
                format!("int g psi dnu at y-index {y_index}")
            } else {
                format!("int g psi_star dnu at y-index {y_index}")
            };
            return Err(Error::CompatibilityViolation {
                moment,
                defect,
                tol: self.tol_compat * scale,
            });
        }
        Ok(sol.rows(0, nv).into_owned())
    }

    /// Solve `Q(y) u = g` with gauge `int u psi_star dnu = 0`.
    pub fn q_pinv(&self, y_index: usize, g: &DVector<f64>) -> Result<DVector<f64>> {
        self.pinv_impl(y_index, g, false)
    }

    /// Solve `Q*(y) u = g` with gauge `int u psi(y,.) dnu = 0`.
    pub fn qstar_pinv(&self, y_index: usize, g: &DVector<f64>) -> Result<DVector<f64>> {
        self.pinv_impl(y_index, g, true)
    }

    /// Apply `q_pinv` row by row across a whole cell field.
    pub fn q_pinv_field(&self, g: &CellField) -> Result<CellField> {
        self.pinv_field_impl(g, false)
    }

    pub fn qstar_pinv_field(&self, g: &CellField) -> Result<CellField> {
        self.pinv_field_impl(g, true)
    }

    fn pinv_field_impl(&self, g: &CellField, adjoint: bool) -> Result<CellField> {
        let ny = g.nrows();
        let nv = g.ncols();
        let rows: Vec<DVector<f64>> = (0..ny)
            .into_par_iter()
            .map(|j| self.pinv_impl(j, &g.row(j).transpose(), adjoint))
            .collect::<Result<Vec<_>>>()?;
        Ok(CellField::from_fn(ny, nv, |j, k| rows[j][k]))
    }

    /// Smallest real part over the nonzero spectrum of `Q(y)`.
    pub fn spectral_gap(&self, y_index: usize) -> Result<f64> {
        spectral_gap_of(&self.q[y_index], y_index)
    }

    pub fn spectral_gap_adjoint(&self, y_index: usize) -> Result<f64> {
        spectral_gap_of(&self.qstar[y_index], y_index)
    }

    /// Minimum spectral gap over the cell; the expansion machinery requires
    /// it positive.
    pub fn min_spectral_gap(&self) -> Result<f64> {
        let gaps: Vec<f64> = (0..self.kernel.n_y())
            .into_par_iter()
            .map(|j| self.spectral_gap(j))
            .collect::<Result<Vec<_>>>()?;
        Ok(gaps.into_iter().fold(f64::INFINITY, f64::min))
    }

    /// The local no-drift moments `int v_a psi psi_star dnu` per cell point.
    pub fn drift_moment(&self) -> Vec<DVector<f64>> {
        let vg = self.velocity();
        let ny = self.kernel.n_y();
        (0..vg.dim)
            .map(|a| {
                DVector::from_fn(ny, |j, _| {
                    (0..vg.len())
                        .map(|k| {
                            vg.weight(k)
                                * vg.component(k, a)
                                * self.psi[(j, k)]
                                * self.kernel.psi_star[k]
                        })
                        .sum()
                })
            })
            .collect()
    }
}

fn spectral_gap_of(m: &DMatrix<f64>, y_index: usize) -> Result<f64> {
    let eigs = m.clone().complex_eigenvalues();
    let scale = eigs.iter().map(|e| e.norm()).fold(0.0_f64, f64::max).max(1e-300);
    let mut gap = f64::INFINITY;
    for e in eigs.iter() {
        if e.norm() > 1e-10 * scale {
            gap = gap.min(e.re);
        }
    }
    if !gap.is_finite() || gap <= 0.0 {
        return Err(Error::NonPositiveGap { y_index, gap });
    }
    Ok(gap)
}
