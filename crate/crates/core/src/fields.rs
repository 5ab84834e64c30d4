//! Sampled fields on the cell and on the macroscopic torus, with the
//! weighted inner products and parity checks used throughout.
//!
//! A `CellField` stores one value per (cell point, velocity node) pair as a
//! column-major matrix: rows index the flattened cell lattice, columns the
//! velocity nodes, so a fixed-velocity slice is contiguous for FFT work.

use crate::grids::{CellGrid, ParityMaps, VelocityGrid};
use crate::spectral::SpectralOps;
use nalgebra::{DMatrix, DVector};

/// Scalar field on cell x velocity space (rows: cell points, cols: nodes).
pub type CellField = DMatrix<f64>;

/// Vector-valued cell field, one component per spatial dimension.
pub type VectorCellField = Vec<CellField>;

/// Scalar field on the macro torus.
pub type MacroField = DVector<f64>;

/// Phase-space field on macro torus x velocity (rows: torus points).
pub type PhaseField = DMatrix<f64>;

/// Parity classes checked on demand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parity {
    EvenV,
    OddV,
    EvenY,
    OddY,
    /// Even under the joint flip (y, v) -> (-y, -v).
    EvenYV,
    /// Odd under the joint flip.
    OddYV,
}

/// Maximum pointwise defect of a declared parity, `max |f - s f_flipped|`.
pub fn parity_defect(f: &CellField, parity: Parity, maps: &ParityMaps) -> f64 {
    let (ny, nv) = (f.nrows(), f.ncols());
    let mut worst: f64 = 0.0;
    for j in 0..ny {
        for k in 0..nv {
            let (jf, kf, sign) = match parity {
                Parity::EvenV => (j, maps.v_flip[k], 1.0),
                Parity::OddV => (j, maps.v_flip[k], -1.0),
                Parity::EvenY => (maps.y_flip[j], k, 1.0),
                Parity::OddY => (maps.y_flip[j], k, -1.0),
                Parity::EvenYV => (maps.y_flip[j], maps.v_flip[k], 1.0),
                Parity::OddYV => (maps.y_flip[j], maps.v_flip[k], -1.0),
            };
            worst = worst.max((f[(j, k)] - sign * f[(jf, kf)]).abs());
        }
    }
    worst
}

/// Symmetrize by averaging over the group element of the given parity.
pub fn symmetrize(f: &CellField, parity: Parity, maps: &ParityMaps) -> CellField {
    let (ny, nv) = (f.nrows(), f.ncols());
    DMatrix::from_fn(ny, nv, |j, k| {
        let (jf, kf, sign) = match parity {
            Parity::EvenV => (j, maps.v_flip[k], 1.0),
            Parity::OddV => (j, maps.v_flip[k], -1.0),
            Parity::EvenY => (maps.y_flip[j], k, 1.0),
            Parity::OddY => (maps.y_flip[j], k, -1.0),
            Parity::EvenYV => (maps.y_flip[j], maps.v_flip[k], 1.0),
            Parity::OddYV => (maps.y_flip[j], maps.v_flip[k], -1.0),
        };
        0.5 * (f[(j, k)] + sign * f[(jf, kf)])
    })
}

/// Velocity moment per cell point: `m(y) = \int f(y, v) w(v) dnu(v)`.
pub fn velocity_moment(f: &CellField, weight: &DVector<f64>, vg: &VelocityGrid) -> DVector<f64> {
    let ny = f.nrows();
    DVector::from_fn(ny, |j, _| {
        (0..vg.len()).map(|k| vg.weight(k) * f[(j, k)] * weight[k]).sum()
    })
}

/// Global weighted inner product over cell x velocity:
/// `(1/n_y) sum_j sum_k w_k f g`.
pub fn inner_yv(f: &CellField, g: &CellField, vg: &VelocityGrid, cg: &CellGrid) -> f64 {
    let ny = cg.points() as f64;
    let mut acc = 0.0;
    for k in 0..vg.len() {
        let w = vg.weight(k);
        for j in 0..f.nrows() {
            acc += w * f[(j, k)] * g[(j, k)];
        }
    }
    acc / ny
}

/// L2 norm under the `inner_yv` inner product.
pub fn norm_yv(f: &CellField, vg: &VelocityGrid, cg: &CellGrid) -> f64 {
    inner_yv(f, f, vg, cg).sqrt()
}

/// `L^2_v` norm per cell point, then max over the cell: the discrete
/// `L^infty_y(L^2_v)` norm.
pub fn norm_linf_y_l2_v(f: &CellField, vg: &VelocityGrid) -> f64 {
    let mut worst: f64 = 0.0;
    for j in 0..f.nrows() {
        let mut acc = 0.0;
        for k in 0..vg.len() {
            acc += vg.weight(k) * f[(j, k)] * f[(j, k)];
        }
        worst = worst.max(acc.sqrt());
    }
    worst
}

/// Per-velocity-node inner product at one cell point.
pub fn inner_v(f: &DVector<f64>, g: &DVector<f64>, vg: &VelocityGrid) -> f64 {
    (0..vg.len()).map(|k| vg.weight(k) * f[k] * g[k]).sum()
}

pub fn norm_v(f: &DVector<f64>, vg: &VelocityGrid) -> f64 {
    inner_v(f, f, vg).sqrt()
}

/// Weighted L2 norm of a phase-space field with macro volume element `dx`.
pub fn norm_xv(f: &PhaseField, vg: &VelocityGrid, dx: f64) -> f64 {
    let mut acc = 0.0;
    for k in 0..vg.len() {
        let w = vg.weight(k);
        for i in 0..f.nrows() {
            acc += w * f[(i, k)] * f[(i, k)];
        }
    }
    (acc * dx).sqrt()
}

/// Multiply a cell field by the velocity component `a` pointwise.
pub fn scale_by_velocity(f: &CellField, vg: &VelocityGrid, a: usize) -> CellField {
    let mut out = f.clone();
    for k in 0..vg.len() {
        let va = vg.component(k, a);
        for j in 0..f.nrows() {
            out[(j, k)] *= va;
        }
    }
    out
}

/// Multiply row `j` by `rho[j]`: the product `rho(y) f(y,v)`.
pub fn scale_rows(f: &CellField, rho: &DVector<f64>) -> CellField {
    let mut out = f.clone();
    for k in 0..f.ncols() {
        for j in 0..f.nrows() {
            out[(j, k)] *= rho[j];
        }
    }
    out
}

/// Rank-one cell field `rho(y) p(v)`.
pub fn outer(rho: &DVector<f64>, profile: &DVector<f64>) -> CellField {
    CellField::from_fn(rho.len(), profile.len(), |j, k| rho[j] * profile[k])
}

/// Spectral derivative of a cell field along cell axis `a`, column by
/// column (each velocity node independently).
pub fn grad_axis(ops: &SpectralOps, f: &CellField, axis: usize) -> CellField {
    let mut out = CellField::zeros(f.nrows(), f.ncols());
    let mut line = vec![0.0; f.nrows()];
    for k in 0..f.ncols() {
        for j in 0..f.nrows() {
            line[j] = f[(j, k)];
        }
        let d = ops.derivative_axis(&line, axis);
        for j in 0..f.nrows() {
            out[(j, k)] = d[j];
        }
    }
    out
}

/// The transport derivative `v . grad_y f` on the cell.
pub fn v_dot_grad(ops: &SpectralOps, vg: &VelocityGrid, f: &CellField) -> CellField {
    let mut acc = CellField::zeros(f.nrows(), f.ncols());
    for a in 0..vg.dim {
        let da = grad_axis(ops, f, a);
        for k in 0..vg.len() {
            let va = vg.component(k, a);
            for j in 0..f.nrows() {
                acc[(j, k)] += va * da[(j, k)];
            }
        }
    }
    acc
}
