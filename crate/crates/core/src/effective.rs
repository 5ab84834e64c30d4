//! Effective elliptic operators on the cell and the Hilbert-expansion
//! artifacts built from them.
//!
//! The operator
//!
//! ```text
//! L rho = -int psi* v . grad_y( Qinv( v . grad_y( psi rho ) ) ) dnu
//! ```
//!
//! is assembled *by composing the discrete operations* (spectral gradient,
//! gauged collision solve, spectral gradient, velocity moment). That makes
//! the Fredholm compatibility conditions of the expansion cascade hold to
//! solver precision at the discrete level, not merely up to truncation: the
//! equation for each expansion coefficient is solvable exactly because the
//! previous one was solved with the same discrete composition. The
//! divergence form `-div(D grad rho) + div(U rho)` with
//! `D = int psi* v (x) Qinv(v psi) dnu` is tabulated alongside and used for
//! ellipticity checks and cross-validation; the adjoint is the matrix
//! transpose, so the duality between the pair is exact.
//!
//! Sign conventions follow the true-inverse semantics `Q Qinv = id` on the
//! compatible subspace, which is what the expansion equations require.

use crate::collision::CollisionBank;
use crate::error::{Error, Result};
use crate::fields::{
    grad_axis, inner_yv, outer, scale_by_velocity, scale_rows, v_dot_grad, CellField,
    VectorCellField,
};
use crate::spectral::SpectralOps;
use nalgebra::linalg::LU;
use nalgebra::{DMatrix, DVector, Dyn};

/// The pair (L, L*) with tabulated coefficients and prefactored gauged
/// solves. The adjoint matrix is the transpose of `matrix`, so the discrete
/// duality `Im(L) = {mean zero}`, `Im(L*) = {orthogonal to rho0}` is exact.
pub struct EffectivePair {
    pub dim: usize,
    pub matrix: DMatrix<f64>,
    /// Diffusion matrix `D(y)`, one `d x d` block per cell point; even in y.
    pub d_field: Vec<DMatrix<f64>>,
    /// Drift field `U(y)` of the divergence form; odd in y.
    pub u_field: Vec<DVector<f64>>,
    /// Cell equilibrium: kernel of L, positive, unit mean.
    pub rho0: DVector<f64>,
    /// Lattice corner modes annihilated by L. Nonempty exactly when the
    /// coefficients are y-independent, where the spectral first derivative
    /// makes L singular along these directions; legitimate fields in that
    /// case carry no corner content and the directions are deflated.
    pub deflation: Vec<DVector<f64>>,
    lu_l: LU<f64, Dyn, Dyn>,
    lu_lstar: LU<f64, Dyn, Dyn>,
    pub tol_compat: f64,
}

fn bordered(
    m: &DMatrix<f64>,
    columns: &[DVector<f64>],
    gauges: &[DVector<f64>],
) -> DMatrix<f64> {
    let n = m.nrows();
    let extra = columns.len();
    assert_eq!(extra, gauges.len());
    let mut b = DMatrix::zeros(n + extra, n + extra);
    b.view_mut((0, 0), (n, n)).copy_from(m);
    for (c, col) in columns.iter().enumerate() {
        for i in 0..n {
            b[(i, n + c)] = col[i];
            b[(n + c, i)] = gauges[c][i];
        }
    }
    b
}

/// Apply the composed operator `rho -> L rho` once.
fn apply_composed_l(
    bank: &CollisionBank,
    ops: &SpectralOps,
    rho: &DVector<f64>,
) -> Result<DVector<f64>> {
    let vg = bank.velocity();
    let f0 = scale_rows(&bank.psi, rho);
    let g = v_dot_grad(ops, vg, &f0);
    let u = bank.q_pinv_field(&g)?;
    let h = v_dot_grad(ops, vg, &u);
    let ny = rho.len();
    Ok(DVector::from_fn(ny, |j, _| {
        -(0..vg.len())
            .map(|k| vg.weight(k) * bank.kernel.psi_star[k] * h[(j, k)])
            .sum::<f64>()
    }))
}

/// Assemble the effective pair: tabulate `D(y)` and `U(y)`, build the
/// composed matrix of `L`, extract `rho0`, and prefactor the gauged solves.
pub fn assemble_effective(bank: &CollisionBank, ops: &SpectralOps) -> Result<EffectivePair> {
    let vg = bank.velocity();
    let dim = vg.dim;
    let ny = bank.kernel.n_y();
    let nv = bank.kernel.n_v();
    let psi_star = &bank.kernel.psi_star;

    // D_ab(y) = int psi* v_a Qinv(v_b psi) dnu.
    let cols: Vec<CellField> = (0..dim)
        .map(|b| bank.q_pinv_field(&scale_by_velocity(&bank.psi, vg, b)))
        .collect::<Result<Vec<_>>>()?;
    let mut d_field = Vec::with_capacity(ny);
    for j in 0..ny {
        let mut d = DMatrix::zeros(dim, dim);
        for a in 0..dim {
            for b in 0..dim {
                d[(a, b)] = (0..nv)
                    .map(|k| vg.weight(k) * psi_star[k] * vg.component(k, a) * cols[b][(j, k)])
                    .sum();
            }
        }
        d_field.push(d);
    }
    for (j, d) in d_field.iter().enumerate() {
        let sym = (d + d.transpose()) * 0.5;
        let min_eig = sym
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if min_eig <= 0.0 {
            return Err(Error::EllipticityFailure { y_index: j, min_eig });
        }
    }

    // U_a(y) = int psi* v_a Qinv(-v . grad_y psi) dnu, so that
    // L rho = -div(D grad rho) + div(U rho).
    let w = bank.q_pinv_field(&(-v_dot_grad(ops, vg, &bank.psi)))?;
    let u_field: Vec<DVector<f64>> = (0..ny)
        .map(|j| {
            DVector::from_fn(dim, |a, _| {
                (0..nv)
                    .map(|k| vg.weight(k) * psi_star[k] * vg.component(k, a) * w[(j, k)])
                    .sum()
            })
        })
        .collect();

    // Composed matrix of L, one basis vector at a time.
    let mut matrix = DMatrix::zeros(ny, ny);
    let mut e = DVector::zeros(ny);
    for j in 0..ny {
        e[j] = 1.0;
        let col = apply_composed_l(bank, ops, &e)?;
        matrix.set_column(j, &col);
        e[j] = 0.0;
    }

    // Probe the lattice corner modes; the ones L annihilates are deflated
    // in every gauged solve.
    let scale = matrix.amax().max(1e-300);
    let deflation: Vec<DVector<f64>> = crate::spectral::corner_modes(&bank.cell().lattice)
        .into_iter()
        .map(DVector::from_vec)
        .filter(|c| (&matrix * c).amax() <= 1e-10 * scale)
        .collect();

    let rho0 = solve_rho0(&matrix, &deflation, bank)?;

    // Gauged solves: L is bordered by the constant column against the mean
    // gauge (plus the deflated corner pairs); L* by the rho0 column.
    let ones = DVector::from_element(ny, 1.0);
    let mean_row = DVector::from_element(ny, 1.0 / ny as f64);
    let mut columns = vec![ones];
    let mut gauges = vec![mean_row.clone()];
    for c in &deflation {
        columns.push(c.clone());
        gauges.push(c / ny as f64);
    }
    let lu_l = LU::new(bordered(&matrix, &columns, &gauges));
    let lstar = matrix.transpose();
    let mut star_columns = vec![rho0.clone()];
    star_columns.extend(deflation.iter().cloned());
    let lu_lstar = LU::new(bordered(&lstar, &star_columns, &gauges));

    Ok(EffectivePair {
        dim,
        matrix,
        d_field,
        u_field,
        rho0,
        deflation,
        lu_l,
        lu_lstar,
        tol_compat: bank.tol_compat,
    })
}

/// Kernel of the composed L: positive, even in y, unit mean. Degenerate
/// corner directions, when present, are shifted away before the null-space
/// extraction so the smooth kernel vector is recovered.
pub fn solve_rho0(
    matrix: &DMatrix<f64>,
    deflation: &[DVector<f64>],
    bank: &CollisionBank,
) -> Result<DVector<f64>> {
    let ny = matrix.nrows();
    let mut shifted = matrix.clone();
    let mu = matrix.amax().max(1.0);
    for c in deflation {
        let nrm = c.dot(c);
        for i in 0..ny {
            for j in 0..ny {
                shifted[(i, j)] += mu * c[i] * c[j] / nrm;
            }
        }
    }
    let mut rho = crate::collision::null_vector(&shifted, "L", 1e6)?;
    if rho.sum() < 0.0 {
        rho = -rho;
    }
    let (mn, mx) = (rho.min(), rho.max());
    if mn <= 0.0 {
        return Err(Error::NonPositive {
            operator: "L kernel (rho0)".into(),
            min: mn,
            max: mx,
        });
    }
    // Symmetrize over the cell reflection and renormalize to unit mean.
    let flip = &bank.kernel.maps.y_flip;
    let sym = DVector::from_fn(ny, |j, _| 0.5 * (rho[j] + rho[flip[j]]));
    let mean = sym.sum() / ny as f64;
    Ok(sym / mean)
}

impl EffectivePair {
    pub fn n_y(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn apply_l(&self, rho: &DVector<f64>) -> DVector<f64> {
        &self.matrix * rho
    }

    pub fn apply_lstar(&self, n: &DVector<f64>) -> DVector<f64> {
        self.matrix.tr_mul(n)
    }

    fn pinv_impl(&self, f: &DVector<f64>, adjoint: bool) -> Result<DVector<f64>> {
        let ny = f.len();
        let extra = 1 + self.deflation.len();
        let mut rhs = DVector::zeros(ny + extra);
        rhs.rows_mut(0, ny).copy_from(f);
        let lu = if adjoint { &self.lu_lstar } else { &self.lu_l };
        let sol = lu.solve(&rhs).ok_or_else(|| {
            Error::SingularSystem(format!("bordered effective solve (adjoint = {adjoint})"))
        })?;
        let defect = (0..extra)
            .map(|i| sol[ny + i])
            .fold(0.0_f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        let scale = (f.norm() / (ny as f64).sqrt()).max(f64::MIN_POSITIVE);
        if defect.abs() > self.tol_compat * scale {
            return Err(Error::RangeViolation {
                operator: if adjoint {
                    "L* (requires int f rho0 dy = 0)".into()
                } else {
                    "L (requires int f dy = 0)".into()
                },
                defect,
                tol: self.tol_compat * scale,
            });
        }
        Ok(sol.rows(0, ny).into_owned())
    }

    /// Solve `L u = f` with gauge `int u dy = 0`; `f` must be mean-free.
    pub fn l_pinv(&self, f: &DVector<f64>) -> Result<DVector<f64>> {
        self.pinv_impl(f, false)
    }

    /// Solve `L* u = f` with gauge `int u dy = 0`; `f` must satisfy
    /// `int f rho0 dy = 0`.
    pub fn lstar_pinv(&self, f: &DVector<f64>) -> Result<DVector<f64>> {
        self.pinv_impl(f, true)
    }

    /// The divergence-form realization `-div(D grad .) + div(U .)`,
    /// assembled from the tabulated coefficient fields with the same
    /// spectral derivatives. Agrees with the composed matrix up to
    /// aliasing, which is spectrally small for smooth kernels.
    pub fn divergence_form_matrix(&self, ops: &SpectralOps) -> DMatrix<f64> {
        let ny = self.n_y();
        let dim = self.dim;
        let mut m = DMatrix::zeros(ny, ny);
        let mut e = vec![0.0; ny];
        for j in 0..ny {
            e[j] = 1.0;
            let mut col = vec![0.0; ny];
            for a in 0..dim {
                // -d_a (sum_b D_ab d_b rho - U_a rho)
                let mut flux = vec![0.0; ny];
                for b in 0..dim {
                    let db = ops.derivative_axis(&e, b);
                    for i in 0..ny {
                        flux[i] += self.d_field[i][(a, b)] * db[i];
                    }
                }
                for i in 0..ny {
                    flux[i] -= self.u_field[i][a] * e[i];
                }
                let da = ops.derivative_axis(&flux, a);
                for i in 0..ny {
                    col[i] -= da[i];
                }
            }
            for i in 0..ny {
                m[(i, j)] = col[i];
            }
            e[j] = 0.0;
        }
        m
    }
}

/// Coefficients of the expansion of the cell equilibrium in the
/// scattering/heterogeneity ratio: `psi0 + eta psi1 + eta^2 psi2 + ...`.
#[derive(Debug, Clone)]
pub struct PsiExpansion {
    pub psi0: CellField,
    pub psi1: CellField,
    pub psi2: CellField,
    pub rho2: DVector<f64>,
}

/// Expansion terms of the flux corrector: `chi ~ chi_m1/eta + chi0 + ...`.
#[derive(Debug, Clone)]
pub struct ChiExpansion {
    pub theta_m1: Vec<DVector<f64>>,
    pub chi_m1: VectorCellField,
    pub chi0: VectorCellField,
    /// Computed solution of the next-order compatibility equation; zero by
    /// parity for symmetric kernels, reported rather than assumed.
    pub theta0: Vec<DVector<f64>>,
}

/// Expansion terms of the adjoint corrector:
/// `chi* ~ chi_s_m1/eta + chi_s0 + eta chi_s1 + ...`.
#[derive(Debug, Clone)]
pub struct ChiStarExpansion {
    pub theta_s_m1: Vec<DVector<f64>>,
    pub chi_s0: VectorCellField,
    /// `chi_s0` without its `theta_s0 psi_star` part (the theorem's tensor
    /// display uses this variant).
    pub chi_s0_bar: VectorCellField,
    pub theta_s0: Vec<DVector<f64>>,
    pub chi_s1: VectorCellField,
    pub theta_s1: Vec<DVector<f64>>,
}

fn moment_against(
    f: &CellField,
    weight: &DVector<f64>,
    vg: &crate::grids::VelocityGrid,
) -> DVector<f64> {
    DVector::from_fn(f.nrows(), |j, _| {
        (0..vg.len())
            .map(|k| vg.weight(k) * weight[k] * f[(j, k)])
            .sum()
    })
}

/// `int psi* v . grad_y(field) dnu` as a function on the cell.
fn star_moment_of_vgrad(
    bank: &CollisionBank,
    ops: &SpectralOps,
    field: &CellField,
) -> DVector<f64> {
    let vg = bank.velocity();
    let h = v_dot_grad(ops, vg, field);
    moment_against(&h, &bank.kernel.psi_star, vg)
}

/// `int psi v . grad_y(field) dnu` (the adjoint-side moment).
fn psi_moment_of_vgrad(bank: &CollisionBank, ops: &SpectralOps, field: &CellField) -> DVector<f64> {
    let vg = bank.velocity();
    let h = v_dot_grad(ops, vg, field);
    DVector::from_fn(field.nrows(), |j, _| {
        (0..vg.len())
            .map(|k| vg.weight(k) * bank.psi[(j, k)] * h[(j, k)])
            .sum()
    })
}

/// Expand the cell equilibrium to second order.
pub fn expand_psi(
    bank: &CollisionBank,
    ops: &SpectralOps,
    eff: &EffectivePair,
) -> Result<PsiExpansion> {
    let vg = bank.velocity();
    let psi0 = scale_rows(&bank.psi, &eff.rho0);
    let psi1 = bank.q_pinv_field(&(-v_dot_grad(ops, vg, &psi0)))?;
    let psi2_hat = bank.q_pinv_field(&(-v_dot_grad(ops, vg, &psi1)))?;
    // rho2 from the fourth-order compatibility: L rho2 = -int psi* v.grad
    // Qinv(-v.grad psi2_hat) dnu.
    let t = bank.q_pinv_field(&(-v_dot_grad(ops, vg, &psi2_hat)))?;
    let rhs = -star_moment_of_vgrad(bank, ops, &t);
    let rho2 = eff.l_pinv(&rhs)?;
    let psi2 = &psi2_hat + scale_rows(&bank.psi, &rho2);
    Ok(PsiExpansion {
        psi0,
        psi1,
        psi2,
        rho2,
    })
}

/// Expand the flux corrector to order zero (with the inverse-order head).
pub fn expand_chi(
    bank: &CollisionBank,
    ops: &SpectralOps,
    eff: &EffectivePair,
    psis: &PsiExpansion,
) -> Result<ChiExpansion> {
    let vg = bank.velocity();
    let dim = vg.dim;
    let mut theta_m1 = Vec::with_capacity(dim);
    let mut chi_m1 = Vec::with_capacity(dim);
    let mut chi0 = Vec::with_capacity(dim);
    let mut theta0 = Vec::with_capacity(dim);
    for b in 0..dim {
        // L theta_m1 = int v_b psi1 psi* dnu - int psi* v.grad Qinv(v_b psi0) dnu
        let moment1 = moment_against(
            &scale_by_velocity(&psis.psi1, vg, b),
            &bank.kernel.psi_star,
            vg,
        );
        let qb = bank.q_pinv_field(&scale_by_velocity(&psis.psi0, vg, b))?;
        let rhs = &moment1 - star_moment_of_vgrad(bank, ops, &qb);
        let th = eff.l_pinv(&rhs)?;
        let cm1 = scale_rows(&bank.psi, &th);

        // chi0_hat = Qinv(v_b psi0 - v.grad chi_m1)
        let arg = scale_by_velocity(&psis.psi0, vg, b) - v_dot_grad(ops, vg, &cm1);
        let chi0_hat = bank.q_pinv_field(&arg)?;

        // Next-order compatibility fixes theta0 (zero by parity under H4;
        // solved and reported, not assumed).
        let m2 = moment_against(
            &scale_by_velocity(&psis.psi2, vg, b),
            &bank.kernel.psi_star,
            vg,
        );
        let inner = bank.q_pinv_field(
            &(scale_by_velocity(&psis.psi1, vg, b) - v_dot_grad(ops, vg, &chi0_hat)),
        )?;
        let rhs0 = &m2 - star_moment_of_vgrad(bank, ops, &inner);
        let th0 = eff.l_pinv(&rhs0)?;
        let c0 = &chi0_hat + scale_rows(&bank.psi, &th0);

        theta_m1.push(th);
        chi_m1.push(cm1);
        chi0.push(c0);
        theta0.push(th0);
    }
    Ok(ChiExpansion {
        theta_m1,
        chi_m1,
        chi0,
        theta0,
    })
}

/// Expand the adjoint corrector to first order.
pub fn expand_chi_star(
    bank: &CollisionBank,
    ops: &SpectralOps,
    eff: &EffectivePair,
) -> Result<ChiStarExpansion> {
    let vg = bank.velocity();
    let dim = vg.dim;
    let ny = bank.kernel.n_y();
    let psi_star_field = outer(&DVector::from_element(ny, 1.0), &bank.kernel.psi_star);
    let mut theta_s_m1 = Vec::with_capacity(dim);
    let mut chi_s0 = Vec::with_capacity(dim);
    let mut chi_s0_bar = Vec::with_capacity(dim);
    let mut theta_s0 = Vec::with_capacity(dim);
    let mut chi_s1 = Vec::with_capacity(dim);
    let mut theta_s1 = Vec::with_capacity(dim);
    for b in 0..dim {
        let v_psi_star = scale_by_velocity(&psi_star_field, vg, b);
        // L* theta_s_m1 = int psi v.grad Qstar_inv(v_b psi*) dnu
        let a_b = bank.qstar_pinv_field(&v_psi_star)?;
        let rhs = psi_moment_of_vgrad(bank, ops, &a_b);
        let th_m1 = eff.lstar_pinv(&rhs)?;
        let chi_sm1 = scale_rows(&psi_star_field, &th_m1);

        // chi_s0_bar = Qstar_inv(v_b psi* + v.grad(theta_s_m1 psi*))
        let arg = &v_psi_star + v_dot_grad(ops, vg, &chi_sm1);
        let s0_bar = bank.qstar_pinv_field(&arg)?;

        // theta_s0 from the second-order compatibility.
        let inner = bank.qstar_pinv_field(&v_dot_grad(ops, vg, &s0_bar))?;
        let rhs0 = psi_moment_of_vgrad(bank, ops, &inner);
        let th0 = eff.lstar_pinv(&rhs0)?;
        let s0 = &s0_bar + scale_rows(&psi_star_field, &th0);

        // chi_s1 = Qstar_inv(v.grad chi_s0) + theta_s1 psi*, with theta_s1
        // from the third-order compatibility.
        let s1_hat = bank.qstar_pinv_field(&v_dot_grad(ops, vg, &s0))?;
        let inner1 = bank.qstar_pinv_field(&v_dot_grad(ops, vg, &s1_hat))?;
        let rhs1 = psi_moment_of_vgrad(bank, ops, &inner1);
        let th1 = eff.lstar_pinv(&rhs1)?;
        let s1 = &s1_hat + scale_rows(&psi_star_field, &th1);

        theta_s_m1.push(th_m1);
        chi_s0.push(s0);
        chi_s0_bar.push(s0_bar);
        theta_s0.push(th0);
        chi_s1.push(s1);
        theta_s1.push(th1);
    }
    Ok(ChiStarExpansion {
        theta_s_m1,
        chi_s0,
        chi_s0_bar,
        theta_s0,
        chi_s1,
        theta_s1,
    })
}

/// The leading and first-order effective diffusion tensors, with the two
/// published routes to the leading one kept separate for cross-checking.
#[derive(Debug, Clone)]
pub struct EffectiveTensors {
    /// Leading tensor from the corrector-moment route.
    pub d_tensor: DMatrix<f64>,
    /// Leading tensor from the theorem's display (uses the bar variant of
    /// the order-zero adjoint corrector).
    pub d_tensor_theorem: DMatrix<f64>,
    /// First-order tensor.
    pub d1_tensor: DMatrix<f64>,
}

pub fn effective_tensors(
    bank: &CollisionBank,
    psis: &PsiExpansion,
    stars: &ChiStarExpansion,
) -> EffectiveTensors {
    let vg = bank.velocity();
    let cg = bank.cell();
    let dim = vg.dim;
    let ny = bank.kernel.n_y();
    let psi_star_field = outer(&DVector::from_element(ny, 1.0), &bank.kernel.psi_star);
    let chi_s_m1: Vec<CellField> = (0..dim)
        .map(|a| scale_rows(&psi_star_field, &stars.theta_s_m1[a]))
        .collect();
    let mut d_tensor = DMatrix::zeros(dim, dim);
    let mut d_theorem = DMatrix::zeros(dim, dim);
    let mut d1 = DMatrix::zeros(dim, dim);
    for a in 0..dim {
        for b in 0..dim {
            let v_psi0 = scale_by_velocity(&psis.psi0, vg, b);
            let v_psi1 = scale_by_velocity(&psis.psi1, vg, b);
            let v_psi2 = scale_by_velocity(&psis.psi2, vg, b);
            d_tensor[(a, b)] = inner_yv(&stars.chi_s0[a], &v_psi0, vg, cg)
                + inner_yv(&chi_s_m1[a], &v_psi1, vg, cg);
            d_theorem[(a, b)] = inner_yv(&stars.chi_s0_bar[a], &v_psi0, vg, cg)
                + inner_yv(&chi_s_m1[a], &v_psi1, vg, cg);
            d1[(a, b)] = inner_yv(&chi_s_m1[a], &v_psi2, vg, cg)
                + inner_yv(&stars.chi_s0[a], &v_psi1, vg, cg)
                + inner_yv(&stars.chi_s1[a], &v_psi0, vg, cg);
        }
    }
    EffectiveTensors {
        d_tensor,
        d_tensor_theorem: d_theorem,
        d1_tensor: d1,
    }
}

/// Everything the macroscopic and harness stages need from the cell:
/// equilibria, expansion coefficients, correctors, and effective tensors.
#[derive(Debug, Clone)]
pub struct ExpansionBundle {
    pub dim: usize,
    pub n_y: usize,
    pub n_v: usize,
    pub psi: CellField,
    pub psi_star: DVector<f64>,
    pub rho0: DVector<f64>,
    pub rho2: DVector<f64>,
    pub psi0: CellField,
    pub psi1: CellField,
    pub psi2: CellField,
    pub theta_m1: Vec<DVector<f64>>,
    pub chi_m1: VectorCellField,
    pub chi0: VectorCellField,
    pub theta0: Vec<DVector<f64>>,
    pub theta_s_m1: Vec<DVector<f64>>,
    pub chi_s_m1: VectorCellField,
    pub chi_s0: VectorCellField,
    pub theta_s0: Vec<DVector<f64>>,
    pub chi_s1: VectorCellField,
    pub theta_s1: Vec<DVector<f64>>,
    pub d_tensor: DMatrix<f64>,
    pub d_tensor_theorem: DMatrix<f64>,
    pub d1_tensor: DMatrix<f64>,
}

/// Run the whole cell cascade.
pub fn build_bundle(bank: &CollisionBank, ops: &SpectralOps) -> Result<ExpansionBundle> {
    // The expansion machinery needs a strictly positive spectral gap.
    bank.min_spectral_gap()?;
    let eff = assemble_effective(bank, ops)?;
    build_bundle_with(bank, ops, &eff)
}

/// Same as [`build_bundle`] reusing an already assembled effective pair.
pub fn build_bundle_with(
    bank: &CollisionBank,
    ops: &SpectralOps,
    eff: &EffectivePair,
) -> Result<ExpansionBundle> {
    let psis = expand_psi(bank, ops, eff)?;
    let chis = expand_chi(bank, ops, eff, &psis)?;
    let stars = expand_chi_star(bank, ops, eff)?;
    let tensors = effective_tensors(bank, &psis, &stars);
    let ny = bank.kernel.n_y();
    let psi_star_field = outer(&DVector::from_element(ny, 1.0), &bank.kernel.psi_star);
    let chi_s_m1: VectorCellField = stars
        .theta_s_m1
        .iter()
        .map(|th| scale_rows(&psi_star_field, th))
        .collect();
    Ok(ExpansionBundle {
        dim: bank.velocity().dim,
        n_y: ny,
        n_v: bank.kernel.n_v(),
        psi: bank.psi.clone(),
        psi_star: bank.kernel.psi_star.clone(),
        rho0: eff.rho0.clone(),
        rho2: psis.rho2.clone(),
        psi0: psis.psi0.clone(),
        psi1: psis.psi1.clone(),
        psi2: psis.psi2.clone(),
        theta_m1: chis.theta_m1.clone(),
        chi_m1: chis.chi_m1.clone(),
        chi0: chis.chi0.clone(),
        theta0: chis.theta0.clone(),
        theta_s_m1: stars.theta_s_m1.clone(),
        chi_s_m1,
        chi_s0: stars.chi_s0.clone(),
        theta_s0: stars.theta_s0.clone(),
        chi_s1: stars.chi_s1.clone(),
        theta_s1: stars.theta_s1.clone(),
        d_tensor: tensors.d_tensor,
        d_tensor_theorem: tensors.d_tensor_theorem,
        d1_tensor: tensors.d1_tensor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collision::CollisionBank;
    use crate::fields::{norm_yv, parity_defect, Parity};
    use crate::grids::{build_velocity_grid, CellGrid, VelocityFamily, VelocitySpec};
    use crate::kernel::{build_kernel, PsiStarSpec, SigmaSpec, VelocityProfile};
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn ops_for(bank: &CollisionBank) -> SpectralOps {
        SpectralOps::new(bank.cell().lattice.clone())
    }

    fn two_velocity_bank(ny: usize) -> CollisionBank {
        let vg = build_velocity_grid(&VelocitySpec {
            dim: 1,
            family: VelocityFamily::Gauss,
            count: 2,
            v_min: 1.0,
            v_max: 1.0,
        })
        .unwrap();
        let cg = CellGrid::new(1, ny).unwrap();
        let k = build_kernel(
            &vg,
            &cg,
            &SigmaSpec::Isotropic { value: 1.0 },
            &PsiStarSpec {
                profile: VelocityProfile::Constant,
            },
        )
        .unwrap();
        CollisionBank::new(k).unwrap()
    }

    fn nontrivial_bank(ny: usize) -> CollisionBank {
        crate::collision::tests::separable_bank(ny, 8)
    }

    #[test]
    fn isotropic_two_velocity_effective_coefficients() {
        // Qinv(v) = v, so D = int v^2 dnu = 1 and U = 0; rho0 = 1.
        let bank = two_velocity_bank(8);
        let ops = ops_for(&bank);
        let eff = assemble_effective(&bank, &ops).unwrap();
        for j in 0..8 {
            assert_relative_eq!(eff.d_field[j][(0, 0)], 1.0, epsilon = 1e-12);
            assert!(eff.u_field[j][0].abs() < 1e-12);
            assert_relative_eq!(eff.rho0[j], 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn v_independent_sigma_gives_closed_form_diffusion() {
        // sigma = s(y) = 1 + 0.5 cos(2 pi y), psi* = 1: Q f = s(y)(f - <f>),
        // D(y) = <v^2>/s(y), U = 0, rho0 = 1.
        let vg = build_velocity_grid(&VelocitySpec {
            dim: 1,
            family: VelocityFamily::Gauss,
            count: 8,
            v_min: 0.2,
            v_max: 1.0,
        })
        .unwrap();
        let cg = CellGrid::new(1, 16).unwrap();
        let k = build_kernel(
            &vg,
            &cg,
            &SigmaSpec::Separable {
                base: 1.0,
                beta: 0.5,
                mode: 1,
                g: VelocityProfile::Constant,
                h: None,
            },
            &PsiStarSpec {
                profile: VelocityProfile::Constant,
            },
        )
        .unwrap();
        let bank = CollisionBank::new(k).unwrap();
        let ops = ops_for(&bank);
        let eff = assemble_effective(&bank, &ops).unwrap();
        let v2: f64 = (0..vg.len())
            .map(|kk| vg.weight(kk) * vg.component(kk, 0).powi(2))
            .sum();
        let two_pi = 2.0 * std::f64::consts::PI;
        for j in 0..cg.points() {
            let s = 1.0 + 0.5 * (two_pi * j as f64 / 16.0).cos();
            assert_relative_eq!(eff.d_field[j][(0, 0)], v2 / s, max_relative = 1e-12);
            assert!(eff.u_field[j][0].abs() < 1e-13);
            assert_relative_eq!(eff.rho0[j], 1.0, epsilon = 1e-11);
        }
    }

    #[test]
    fn coefficient_parities_and_divergence_form_agreement() {
        let bank = nontrivial_bank(32);
        let ops = ops_for(&bank);
        let eff = assemble_effective(&bank, &ops).unwrap();
        let flip = &bank.kernel.maps.y_flip;
        for j in 0..eff.n_y() {
            assert!((eff.d_field[j][(0, 0)] - eff.d_field[flip[j]][(0, 0)]).abs() < 1e-12);
            assert!((eff.u_field[j][0] + eff.u_field[flip[j]][0]).abs() < 1e-12);
            assert!((eff.rho0[j] - eff.rho0[flip[j]]).abs() < 1e-12);
        }
        // The kernel is chosen so the drift actually matters.
        let umax = (0..eff.n_y())
            .map(|j| eff.u_field[j][0].abs())
            .fold(0.0_f64, f64::max);
        assert!(umax > 1e-4, "U unexpectedly zero ({umax:.3e})");
        let spread = eff.rho0.max() - eff.rho0.min();
        assert!(spread > 1e-4, "rho0 unexpectedly constant ({spread:.3e})");
        // Composed operator vs divergence form: equal up to aliasing.
        let div_form = eff.divergence_form_matrix(&ops);
        let rel = (&eff.matrix - &div_form).amax() / eff.matrix.amax();
        assert!(rel < 1e-9, "divergence-form mismatch {rel:.3e}");
        // L rho0 residual.
        let res = eff.apply_l(&eff.rho0).amax();
        assert!(res < 1e-11, "L rho0 residual {res:.3e}");
        // rho0 against a dense null-space oracle.
        let oracle = crate::collision::null_vector(&eff.matrix, "L oracle", 1e6).unwrap();
        let scaled = &oracle * (eff.rho0.sum() / oracle.sum());
        assert!((scaled - &eff.rho0).amax() < 1e-10);
    }

    #[test]
    fn l_pinv_closed_form_and_range_violation() {
        let bank = two_velocity_bank(16);
        let ops = ops_for(&bank);
        let eff = assemble_effective(&bank, &ops).unwrap();
        // Constant-coefficient L = -d^2/dy^2 (D = 1):
        // f = sin(2 pi y) -> u = sin(2 pi y)/(4 pi^2).
        let two_pi = 2.0 * std::f64::consts::PI;
        let f = DVector::from_fn(16, |j, _| (two_pi * j as f64 / 16.0).sin());
        let u = eff.l_pinv(&f).unwrap();
        for j in 0..16 {
            assert_relative_eq!(
                u[j],
                (two_pi * j as f64 / 16.0).sin() / (two_pi * two_pi),
                epsilon = 1e-12
            );
        }
        let ones = DVector::from_element(16, 1.0);
        assert!(matches!(
            eff.l_pinv(&ones),
            Err(Error::RangeViolation { .. })
        ));
    }

    #[test]
    fn pinv_matches_dense_oracle_and_preserves_parity() {
        let bank = nontrivial_bank(16);
        let ops = ops_for(&bank);
        let eff = assemble_effective(&bank, &ops).unwrap();
        let ny = eff.n_y();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mean_row = DVector::from_element(ny, 1.0 / ny as f64);
        for _ in 0..5 {
            let mut f = DVector::from_fn(ny, |_, _| rng.random::<f64>() - 0.5);
            f.add_scalar_mut(-f.mean());
            let u = eff.l_pinv(&f).unwrap();
            let u0 = crate::oracle::constrained_least_squares(&eff.matrix, &f, &mean_row).unwrap();
            assert!((&u - &u0).amax() / u.amax() < 1e-10);

            // L*: project onto the range (orthogonal to rho0).
            let mut g = DVector::from_fn(ny, |_, _| rng.random::<f64>() - 0.5);
            let proj = g.dot(&eff.rho0) / eff.rho0.dot(&eff.rho0);
            g -= &eff.rho0 * proj;
            let us = eff.lstar_pinv(&g).unwrap();
            let lstar = eff.matrix.transpose();
            let us0 = crate::oracle::constrained_least_squares(&lstar, &g, &mean_row).unwrap();
            assert!((&us - &us0).amax() / us.amax() < 1e-10);
        }
        // Odd input -> odd output.
        let flip = &bank.kernel.maps.y_flip;
        let raw = DVector::from_fn(ny, |_, _| rng.random::<f64>() - 0.5);
        let f_odd = DVector::from_fn(ny, |j, _| 0.5 * (raw[j] - raw[flip[j]]));
        let u = eff.l_pinv(&f_odd).unwrap();
        let odd_defect = (0..ny)
            .map(|j| (u[j] + u[flip[j]]).abs())
            .fold(0.0_f64, f64::max);
        assert!(odd_defect < 1e-11);
    }

    #[test]
    fn isotropic_expansion_collapses() {
        let bank = two_velocity_bank(8);
        let ops = ops_for(&bank);
        let eff = assemble_effective(&bank, &ops).unwrap();
        let psis = expand_psi(&bank, &ops, &eff).unwrap();
        assert!((psis.psi0.add_scalar(-1.0)).amax() < 1e-12);
        assert!(psis.psi1.amax() < 1e-12);
        assert!(psis.psi2.amax() < 1e-12);
        assert!(psis.rho2.amax() < 1e-12);
        let chis = expand_chi(&bank, &ops, &eff, &psis).unwrap();
        assert!(chis.theta_m1[0].amax() < 1e-12);
        assert!(chis.chi_m1[0].amax() < 1e-12);
        // chi0 = v for the two-velocity isotropic kernel.
        let vg = bank.velocity();
        for j in 0..8 {
            for k in 0..2 {
                assert_relative_eq!(chis.chi0[0][(j, k)], vg.component(k, 0), epsilon = 1e-12);
            }
        }
        let stars = expand_chi_star(&bank, &ops, &eff).unwrap();
        assert!(stars.theta_s_m1[0].amax() < 1e-12);
        assert!(stars.theta_s0[0].amax() < 1e-12);
        assert!(stars.chi_s1[0].amax() < 1e-12);
        for j in 0..8 {
            for k in 0..2 {
                assert_relative_eq!(stars.chi_s0[0][(j, k)], vg.component(k, 0), epsilon = 1e-12);
            }
        }
        let t = effective_tensors(&bank, &psis, &stars);
        assert_relative_eq!(t.d_tensor[(0, 0)], 1.0, epsilon = 1e-12);
        assert!(t.d1_tensor[(0, 0)].abs() < 1e-12);
    }

    #[test]
    fn expansion_parities_hold() {
        let bank = nontrivial_bank(32);
        let ops = ops_for(&bank);
        let eff = assemble_effective(&bank, &ops).unwrap();
        let psis = expand_psi(&bank, &ops, &eff).unwrap();
        let maps = &bank.kernel.maps;
        assert!(parity_defect(&psis.psi0, Parity::EvenV, maps) < 1e-11);
        assert!(parity_defect(&psis.psi0, Parity::EvenY, maps) < 1e-11);
        assert!(parity_defect(&psis.psi1, Parity::OddV, maps) < 1e-11);
        assert!(parity_defect(&psis.psi1, Parity::OddY, maps) < 1e-11);
        assert!(parity_defect(&psis.psi2, Parity::EvenV, maps) < 1e-11);
        let flip = &maps.y_flip;
        let ny = bank.kernel.n_y();
        // rho2 even in y.
        for j in 0..ny {
            assert!((psis.rho2[j] - psis.rho2[flip[j]]).abs() < 1e-11);
        }
        let chis = expand_chi(&bank, &ops, &eff, &psis).unwrap();
        let stars = expand_chi_star(&bank, &ops, &eff).unwrap();
        for j in 0..ny {
            assert!((chis.theta_m1[0][j] + chis.theta_m1[0][flip[j]]).abs() < 1e-11);
            assert!((stars.theta_s_m1[0][j] + stars.theta_s_m1[0][flip[j]]).abs() < 1e-11);
            assert!((stars.theta_s1[0][j] + stars.theta_s1[0][flip[j]]).abs() < 1e-11);
        }
        // theta0 and theta_s0 vanish by parity; they are computed, so this
        // is a real check of the machinery.
        assert!(
            chis.theta0[0].amax() < 1e-10,
            "theta0 = {:.3e}",
            chis.theta0[0].amax()
        );
        assert!(
            stars.theta_s0[0].amax() < 1e-10,
            "theta_s0 = {:.3e}",
            stars.theta_s0[0].amax()
        );
        // The nontrivial kernel must excite the correctors.
        assert!(norm_yv(&psis.psi1, bank.velocity(), bank.cell()) > 1e-4);
        assert!(chis.theta_m1[0].amax() > 1e-5);
        assert!(stars.theta_s_m1[0].amax() > 1e-5);
    }

    #[test]
    fn tensor_routes_agree_and_are_positive() {
        let bank = nontrivial_bank(32);
        let ops = ops_for(&bank);
        let eff = assemble_effective(&bank, &ops).unwrap();
        let psis = expand_psi(&bank, &ops, &eff).unwrap();
        let stars = expand_chi_star(&bank, &ops, &eff).unwrap();
        let t = effective_tensors(&bank, &psis, &stars);
        assert!(
            (&t.d_tensor - &t.d_tensor_theorem).amax() < 1e-11,
            "routes differ: {:.3e}",
            (&t.d_tensor - &t.d_tensor_theorem).amax()
        );
        assert!(t.d_tensor[(0, 0)] > 0.0);
    }

    #[test]
    fn scaling_sigma_scales_diffusion_inversely_and_fixes_rho0() {
        let vg = build_velocity_grid(&VelocitySpec {
            dim: 1,
            family: VelocityFamily::Gauss,
            count: 8,
            v_min: 0.2,
            v_max: 1.0,
        })
        .unwrap();
        let cg = CellGrid::new(1, 16).unwrap();
        let build = |scale: f64| {
            let k = build_kernel(
                &vg,
                &cg,
                &SigmaSpec::Separable {
                    base: scale,
                    beta: 0.4,
                    mode: 1,
                    g: VelocityProfile::PolyEven { c0: 0.0, c2: 1.0 },
                    h: Some(VelocityProfile::Gaussian { a: 0.5 }),
                },
                &PsiStarSpec {
                    profile: VelocityProfile::PolyEven { c0: 1.0, c2: 0.5 },
                },
            )
            .unwrap();
            let bank = CollisionBank::new(k).unwrap();
            let ops = SpectralOps::new(cg.lattice.clone());
            assemble_effective(&bank, &ops).unwrap()
        };
        let e1 = build(1.0);
        let e2 = build(2.0);
        for j in 0..cg.points() {
            assert_relative_eq!(
                e2.d_field[j][(0, 0)],
                0.5 * e1.d_field[j][(0, 0)],
                max_relative = 1e-12
            );
        }
        assert!((&e1.rho0 - &e2.rho0).amax() < 1e-11);
    }
}
