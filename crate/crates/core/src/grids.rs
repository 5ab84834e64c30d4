//! Discretizations of the velocity set, the periodicity cell, and the
//! macroscopic torus.
//!
//! The velocity set is a finite symmetric quadrature: every node appears
//! together with its mirror image at the same weight, no node is zero, and
//! the weights sum to one so the node/weight pair is a discrete probability
//! measure. Velocity integrals everywhere in the crate are plain weighted
//! sums over this grid, which makes symmetry cancellations exact.

use crate::error::{Error, Result};
use crate::spectral::Lattice;
use serde::{Deserialize, Serialize};

/// Quadrature family for the one-dimensional node set that gets mirrored
/// (and tensorized for `dim > 1`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VelocityFamily {
    /// Gauss-Legendre nodes on `[v_min, v_max]`.
    Gauss,
    /// Midpoint nodes of a uniform partition of `[v_min, v_max]`.
    Uniform,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VelocitySpec {
    pub dim: usize,
    pub family: VelocityFamily,
    /// Nodes per axis, counting both half-lines; must be even.
    pub count: usize,
    pub v_min: f64,
    pub v_max: f64,
}

/// Symmetric velocity quadrature. `nodes` is row-major `n x dim`.
#[derive(Debug, Clone)]
pub struct VelocityGrid {
    pub dim: usize,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    flip: Vec<usize>,
}

impl VelocityGrid {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn node(&self, k: usize) -> &[f64] {
        &self.nodes[k * self.dim..(k + 1) * self.dim]
    }

    /// Component `a` of node `k`.
    pub fn component(&self, k: usize, a: usize) -> f64 {
        self.nodes[k * self.dim + a]
    }

    pub fn weight(&self, k: usize) -> f64 {
        self.weights[k]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Index of the node `-v_k`.
    pub fn flip_index(&self, k: usize) -> usize {
        self.flip[k]
    }

    /// Weighted sum over the grid: the discrete `\int f dnu`.
    pub fn integrate<F: Fn(usize) -> f64>(&self, f: F) -> f64 {
        (0..self.len()).map(|k| self.weights[k] * f(k)).sum()
    }

    /// First moment `\int v dnu`, zero by symmetry.
    pub fn first_moment(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for k in 0..self.len() {
            for a in 0..self.dim {
                m[a] += self.weights[k] * self.component(k, a);
            }
        }
        m
    }

    /// Second moment matrix `\int v (x) v dnu`.
    pub fn second_moment(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.dim, self.dim);
        for k in 0..self.len() {
            for a in 0..self.dim {
                for b in 0..self.dim {
                    m[(a, b)] += self.weights[k] * self.component(k, a) * self.component(k, b);
                }
            }
        }
        m
    }
}

/// Gauss-Legendre nodes and weights on `[-1, 1]` by Newton iteration on the
/// Legendre recurrence.
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        // Chebyshev-like initial guess.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            if n == 1 {
                p1 = x;
            }
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (mut p0, mut p1) = (1.0, x);
        for k in 2..=n {
            let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
            p0 = p1;
            p1 = p2;
        }
        let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
        nodes[n - 1 - i] = x;
        weights[n - 1 - i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

/// Build the symmetric velocity quadrature described by `spec`.
///
/// One-dimensional nodes are placed on `[v_min, v_max]`, mirrored to the
/// negative half-line with equal weights, and renormalized so all weights
/// sum to one. For `dim > 1` the node set is the tensor product of the
/// per-axis set, which keeps the mirror symmetry.
pub fn build_velocity_grid(spec: &VelocitySpec) -> Result<VelocityGrid> {
    if spec.count % 2 != 0 || spec.count == 0 {
        return Err(Error::GridSpec(format!(
            "odd node count {} (the grid must pair v with -v)",
            spec.count
        )));
    }
    if spec.v_min <= 0.0 {
        return Err(Error::GridSpec(format!(
            "v_min = {} must be positive so 0 is excluded from V",
            spec.v_min
        )));
    }
    if spec.v_max < spec.v_min {
        return Err(Error::GridSpec("v_max < v_min".into()));
    }
    if spec.dim == 0 || spec.dim > 3 {
        return Err(Error::GridSpec(format!("unsupported dim {}", spec.dim)));
    }
    let half = spec.count / 2;
    let (mut pos_nodes, mut pos_weights) = if spec.v_max == spec.v_min {
        if half != 1 {
            return Err(Error::GridSpec(
                "degenerate interval v_min == v_max admits exactly one node per side".into(),
            ));
        }
        (vec![spec.v_min], vec![1.0])
    } else {
        let (xs, ws) = match spec.family {
            VelocityFamily::Gauss => gauss_legendre(half),
            VelocityFamily::Uniform => {
                let xs: Vec<f64> = (0..half)
                    .map(|i| -1.0 + (2.0 * i as f64 + 1.0) / half as f64)
                    .collect();
                (xs, vec![2.0 / half as f64; half])
            }
        };
        let mid = 0.5 * (spec.v_min + spec.v_max);
        let rad = 0.5 * (spec.v_max - spec.v_min);
        (
            xs.iter().map(|x| mid + rad * x).collect(),
            ws.iter().map(|w| w * rad).collect(),
        )
    };
    // Mirror: order as (-v_half, ..., -v_1, v_1, ..., v_half).
    let mut line_nodes: Vec<f64> = pos_nodes.iter().rev().map(|v| -v).collect();
    line_nodes.append(&mut pos_nodes);
    let mut line_weights: Vec<f64> = pos_weights.iter().rev().cloned().collect();
    line_weights.append(&mut pos_weights);

    // Tensorize.
    let per_axis = line_nodes.len();
    let total = per_axis.pow(spec.dim as u32);
    let mut nodes = Vec::with_capacity(total * spec.dim);
    let mut weights = Vec::with_capacity(total);
    for idx in 0..total {
        let mut rem = idx;
        let mut w = 1.0;
        for _ in 0..spec.dim {
            let a = rem % per_axis;
            rem /= per_axis;
            nodes.push(line_nodes[a]);
            w *= line_weights[a];
        }
        weights.push(w);
    }
    let wsum: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= wsum;
    }

    // Locate -v for each node through the per-axis index reversal.
    let mut flip = vec![0usize; total];
    for idx in 0..total {
        let mut rem = idx;
        let mut fidx = 0;
        let mut stride = 1;
        for _ in 0..spec.dim {
            let a = rem % per_axis;
            rem /= per_axis;
            fidx += (per_axis - 1 - a) * stride;
            stride *= per_axis;
        }
        flip[idx] = fidx;
    }

    let grid = VelocityGrid {
        dim: spec.dim,
        nodes,
        weights,
        flip,
    };

    // Discrete remnant of (H1): no direction may annihilate every node.
    if spec.dim >= 2 {
        let m = nalgebra::DMatrix::from_fn(grid.len(), spec.dim, |k, a| grid.component(k, a));
        let svd = m.svd(false, false);
        let smin = svd.singular_values[svd.singular_values.len() - 1];
        if smin < 1e-12 {
            return Err(Error::GridSpec(
                "velocity nodes are annihilated by a direction (H1 check failed)".into(),
            ));
        }
    }
    Ok(grid)
}

/// Uniform periodic grid on the unit cell `[0,1)^d`.
#[derive(Debug, Clone)]
pub struct CellGrid {
    pub lattice: Lattice,
}

impl CellGrid {
    pub fn new(dim: usize, points_per_dim: usize) -> Result<Self> {
        if points_per_dim % 2 != 0 {
            return Err(Error::GridSpec(format!(
                "cell grid count {points_per_dim} must be even so y -> -y maps grid points to grid points"
            )));
        }
        Ok(Self {
            lattice: Lattice::new(dim, points_per_dim, 1.0),
        })
    }

    pub fn points(&self) -> usize {
        self.lattice.points()
    }

    pub fn spacing(&self) -> f64 {
        self.lattice.spacing()
    }

    pub fn coords(&self, j: usize) -> Vec<f64> {
        self.lattice.coords(j)
    }

    /// Mean over the cell (the cell has measure one).
    pub fn mean(&self, values: &[f64]) -> f64 {
        values.iter().sum::<f64>() / self.points() as f64
    }
}

/// Uniform periodic grid on the macroscopic torus of edge `period`,
/// carrying `cells` heterogeneity cells per period (`alpha = period/cells`).
#[derive(Debug, Clone)]
pub struct MacroGrid {
    pub lattice: Lattice,
    pub cells: usize,
}

impl MacroGrid {
    pub fn new(dim: usize, period: f64, cells: usize, points_per_cell: usize) -> Result<Self> {
        if cells == 0 || points_per_cell == 0 {
            return Err(Error::GridSpec("cells and points_per_cell must be positive".into()));
        }
        if cells % 2 != 0 && cells != 1 {
            // An odd cell count still tiles the torus; parity maps need the
            // total point count even, which points_per_cell controls below.
        }
        let n = cells * points_per_cell;
        if n % 2 != 0 {
            return Err(Error::GridSpec(format!(
                "macro grid count {n} must be even for exact parity maps"
            )));
        }
        Ok(Self {
            lattice: Lattice::new(dim, n, period),
            cells,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.lattice.period / self.cells as f64
    }

    pub fn points_per_cell(&self) -> usize {
        self.lattice.n / self.cells
    }

    pub fn points(&self) -> usize {
        self.lattice.points()
    }

    /// Cell coordinate `frac(x/alpha)` of lattice point `j`, exact as a
    /// rational of grid counts: point `i` on an axis maps to
    /// `(i mod points_per_cell) / points_per_cell`.
    pub fn cell_coordinate(&self, j: usize) -> Vec<f64> {
        let m = self.points_per_cell();
        let mut out = Vec::with_capacity(self.lattice.dim);
        let mut rem = j;
        for _ in 0..self.lattice.dim {
            let i = rem % self.lattice.n;
            rem /= self.lattice.n;
            out.push((i % m) as f64 / m as f64);
        }
        out
    }
}

/// Index permutations realizing `v -> -v` and `y -> -y mod 1`.
#[derive(Debug, Clone)]
pub struct ParityMaps {
    pub v_flip: Vec<usize>,
    pub y_flip: Vec<usize>,
}

pub fn parity_maps(vg: &VelocityGrid, cg: &CellGrid) -> ParityMaps {
    ParityMaps {
        v_flip: (0..vg.len()).map(|k| vg.flip_index(k)).collect(),
        y_flip: (0..cg.points()).map(|j| cg.lattice.flip_index(j)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn two_velocity_model_is_symmetry_forced() {
        let g = build_velocity_grid(&VelocitySpec {
            dim: 1,
            family: VelocityFamily::Gauss,
            count: 2,
            v_min: 1.0,
            v_max: 1.0,
        })
        .unwrap();
        assert_eq!(g.len(), 2);
        assert_relative_eq!(g.component(0, 0), -1.0);
        assert_relative_eq!(g.component(1, 0), 1.0);
        assert_relative_eq!(g.weight(0), 0.5);
        assert_relative_eq!(g.weight(1), 0.5);
        assert_eq!(g.flip_index(0), 1);
        assert_eq!(g.flip_index(1), 0);
    }

    #[test]
    fn eight_node_weights_normalize() {
        let g = build_velocity_grid(&VelocitySpec {
            dim: 1,
            family: VelocityFamily::Gauss,
            count: 8,
            v_min: 0.2,
            v_max: 1.0,
        })
        .unwrap();
        assert_eq!(g.len(), 8);
        let s: f64 = g.weights().iter().sum();
        assert!((s - 1.0).abs() < 1e-15);
        for k in 0..g.len() {
            assert!(g.component(k, 0).abs() >= 0.2);
        }
    }

    #[test]
    fn odd_count_rejected() {
        let err = build_velocity_grid(&VelocitySpec {
            dim: 1,
            family: VelocityFamily::Gauss,
            count: 3,
            v_min: 0.2,
            v_max: 1.0,
        });
        assert!(matches!(err, Err(crate::error::Error::GridSpec(_))));
        let err = build_velocity_grid(&VelocitySpec {
            dim: 1,
            family: VelocityFamily::Gauss,
            count: 4,
            v_min: 0.0,
            v_max: 1.0,
        });
        assert!(matches!(err, Err(crate::error::Error::GridSpec(_))));
    }

    #[test]
    fn quadrature_moments() {
        for spec in [
            VelocitySpec {
                dim: 1,
                family: VelocityFamily::Gauss,
                count: 8,
                v_min: 0.2,
                v_max: 1.0,
            },
            VelocitySpec {
                dim: 2,
                family: VelocityFamily::Uniform,
                count: 4,
                v_min: 0.3,
                v_max: 1.0,
            },
        ] {
            let g = build_velocity_grid(&spec).unwrap();
            for m in g.first_moment() {
                assert!(m.abs() < 1e-15, "first moment {m}");
            }
            let m2 = g.second_moment();
            let eig = m2.clone().symmetric_eigen();
            for e in eig.eigenvalues.iter() {
                assert!(*e > 0.0, "second moment not SPD");
            }
        }
    }

    #[test]
    fn cell_grid_flip_indices() {
        let cg = CellGrid::new(1, 4).unwrap();
        let vg = build_velocity_grid(&VelocitySpec {
            dim: 1,
            family: VelocityFamily::Gauss,
            count: 2,
            v_min: 1.0,
            v_max: 1.0,
        })
        .unwrap();
        let maps = parity_maps(&vg, &cg);
        assert_eq!(maps.y_flip, vec![0, 3, 2, 1]);
        assert_eq!(maps.v_flip, vec![1, 0]);
        assert!(CellGrid::new(1, 5).is_err());
    }

    #[test]
    fn macro_grid_cell_coordinates_land_on_cell_fractions() {
        let mg = MacroGrid::new(1, 1.0, 4, 8).unwrap();
        assert_eq!(mg.points(), 32);
        assert_relative_eq!(mg.alpha(), 0.25);
        let c = mg.cell_coordinate(11); // 11 mod 8 = 3 -> 3/8
        assert_relative_eq!(c[0], 3.0 / 8.0);
    }

    proptest! {
        #[test]
        fn flips_are_weight_preserving_involutions(count in 1usize..6, nm in 1usize..8) {
            let g = build_velocity_grid(&VelocitySpec {
                dim: 1,
                family: VelocityFamily::Gauss,
                count: 2 * count,
                v_min: 0.1,
                v_max: 1.0,
            }).unwrap();
            for k in 0..g.len() {
                let f = g.flip_index(k);
                prop_assert_eq!(g.flip_index(f), k);
                prop_assert!((g.weight(f) - g.weight(k)).abs() < 1e-16);
                prop_assert!((g.component(f, 0) + g.component(k, 0)).abs() < 1e-15);
            }
            let cg = CellGrid::new(1, 2 * nm).unwrap();
            let maps = parity_maps(&g, &cg);
            for j in 0..cg.points() {
                prop_assert_eq!(maps.y_flip[maps.y_flip[j]], j);
            }
        }
    }
}
