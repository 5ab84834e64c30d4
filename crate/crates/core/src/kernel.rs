//! Scattering kernel construction.
//!
//! A kernel is specified by a small family language (isotropic, separable
//! in a cell profile and a velocity profile, a deliberate drift tilt for
//! negative controls, or a raw table), together with a positive even
//! reference equilibrium `psi_star`. The total cross-section is then
//! *derived*: `Sigma(y,v) = [int sigma(y,v,v') psi_star(v') dnu(v')] / psi_star(v)`,
//! which makes `Q* psi_star = 0` hold pointwise by construction.
//!
//! Symmetric families are tabulated and then averaged over the parity group
//! `{1, v-reversal, y-reflection}` so the symmetry identities hold to
//! machine precision on the grid rather than to modeling tolerance.

use crate::error::{Error, Result};
use crate::fields::CellField;
use crate::grids::{parity_maps, CellGrid, ParityMaps, VelocityGrid};
use crate::spectral::SpectralOps;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Closed-form velocity profiles used by kernel and source specs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VelocityProfile {
    Constant,
    /// `c0 + c2 |v|^2`, even.
    PolyEven { c0: f64, c2: f64 },
    /// `exp(-a |v|^2)`, even.
    Gaussian { a: f64 },
    /// `c1 v_1`, odd; only meaningful where asymmetry is wanted.
    PolyOdd { c1: f64 },
}

impl VelocityProfile {
    pub fn eval(&self, v: &[f64]) -> f64 {
        let v2: f64 = v.iter().map(|x| x * x).sum();
        match *self {
            VelocityProfile::Constant => 1.0,
            VelocityProfile::PolyEven { c0, c2 } => c0 + c2 * v2,
            VelocityProfile::Gaussian { a } => (-a * v2).exp(),
            VelocityProfile::PolyOdd { c1 } => c1 * v[0],
        }
    }

    pub fn is_even(&self) -> bool {
        !matches!(self, VelocityProfile::PolyOdd { .. })
    }
}

/// Even cell profile `c(y) = (1/d) sum_a cos(2 pi mode y_a)`.
fn cell_profile(mode: u32, y: &[f64]) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    y.iter().map(|ya| (two_pi * mode as f64 * ya).cos()).sum::<f64>() / y.len() as f64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum SigmaSpec {
    /// `sigma = value`, independent of everything.
    Isotropic { value: f64 },
    /// `sigma(y, v', v) = base (1 + beta c(y) g(v') h(v))` with even `g`,
    /// `h` and `c(y)` the cosine cell profile of the given mode. With
    /// `h != g` the operator is not symmetric under swapping `v` and `v'`,
    /// so the local equilibrium differs from `psi_star` and depends on `y`.
    /// `h` defaults to `g`.
    Separable {
        base: f64,
        beta: f64,
        mode: u32,
        g: VelocityProfile,
        h: Option<VelocityProfile>,
    },
    /// `sigma = base (1 + beta (v_1 + v'_1) / (2 v_scale))`: breaks the
    /// reciprocity symmetry on purpose; H4 negative control.
    DriftTilt { base: f64, beta: f64 },
    /// Raw table, row-major over (cell point, v' index, v index).
    Tabulated { values: Vec<f64> },
}

impl SigmaSpec {
    /// Whether the family is symmetric by construction.
    pub fn symmetric_family(&self) -> bool {
        match self {
            SigmaSpec::Isotropic { .. } | SigmaSpec::Separable { .. } => true,
            SigmaSpec::DriftTilt { .. } | SigmaSpec::Tabulated { .. } => false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PsiStarSpec {
    pub profile: VelocityProfile,
}

#[derive(Debug, Clone, Copy)]
pub struct KernelBuildOptions {
    /// Reject tables whose parity-symmetry defect exceeds `symmetry_tol`
    /// (after which the symmetrized table is used). Disable for negative
    /// controls that deliberately violate H4.
    pub enforce_symmetry: bool,
    pub symmetry_tol: f64,
}

impl Default for KernelBuildOptions {
    fn default() -> Self {
        Self {
            enforce_symmetry: true,
            symmetry_tol: 1e-12,
        }
    }
}

/// Tabulated scattering data on one cell/velocity grid pair.
#[derive(Debug, Clone)]
pub struct ScatteringKernel {
    pub velocity: VelocityGrid,
    pub cell: CellGrid,
    pub maps: ParityMaps,
    /// Per cell point: matrix `sigma(y_j, v_a, v_b)`, first velocity
    /// argument as the row.
    pub sigma: Vec<DMatrix<f64>>,
    /// Derived total cross-section `Sigma(y_j, v_k)`.
    pub sigma_total: CellField,
    /// Reference equilibrium, even and positive, normalized to
    /// `int (psi_star)^2 dnu = 1`.
    pub psi_star: DVector<f64>,
    spec: SigmaSpec,
    /// Velocity scale used by the drift family.
    v_scale: f64,
}

fn eval_sigma_spec(
    spec: &SigmaSpec,
    vg: &VelocityGrid,
    cg: &CellGrid,
    v_scale: f64,
    y: &[f64],
    a: usize,
    b: usize,
) -> f64 {
    match spec {
        SigmaSpec::Isotropic { value } => *value,
        SigmaSpec::Separable {
            base,
            beta,
            mode,
            g,
            h,
        } => {
            let h = h.unwrap_or(*g);
            base * (1.0 + beta * cell_profile(*mode, y) * g.eval(vg.node(a)) * h.eval(vg.node(b)))
        }
        SigmaSpec::DriftTilt { base, beta } => {
            base * (1.0 + beta * (vg.component(a, 0) + vg.component(b, 0)) / (2.0 * v_scale))
        }
        SigmaSpec::Tabulated { values } => {
            // Only valid at grid points; callers evaluating off-grid go
            // through `sigma_at` which interpolates.
            let nv = vg.len();
            let spacing = cg.spacing();
            let mut j = 0;
            let mut stride = 1;
            for &ya in y {
                let idx = (ya / spacing).round() as usize % cg.lattice.n;
                j += idx * stride;
                stride *= cg.lattice.n;
            }
            values[(j * nv + a) * nv + b]
        }
    }
}

pub fn build_kernel(
    velocity: &VelocityGrid,
    cell: &CellGrid,
    sigma_spec: &SigmaSpec,
    psi_star_spec: &PsiStarSpec,
) -> Result<ScatteringKernel> {
    build_kernel_with(
        velocity,
        cell,
        sigma_spec,
        psi_star_spec,
        KernelBuildOptions::default(),
    )
}

pub fn build_kernel_with(
    velocity: &VelocityGrid,
    cell: &CellGrid,
    sigma_spec: &SigmaSpec,
    psi_star_spec: &PsiStarSpec,
    options: KernelBuildOptions,
) -> Result<ScatteringKernel> {
    assert_eq!(velocity.dim, cell.lattice.dim, "grid dimensions must agree");
    let nv = velocity.len();
    let ny = cell.points();
    let maps = parity_maps(velocity, cell);
    let v_scale = (0..nv)
        .map(|k| velocity.component(k, 0).abs())
        .fold(0.0_f64, f64::max);

    // psi_star: evaluate, v-symmetrize, check positivity, normalize.
    if !psi_star_spec.profile.is_even() {
        return Err(Error::KernelSpec(
            "psi_star profile must be even in v".into(),
        ));
    }
    let mut psi_star = DVector::from_fn(nv, |k, _| psi_star_spec.profile.eval(velocity.node(k)));
    for k in 0..nv {
        let kf = maps.v_flip[k];
        if kf > k {
            let avg = 0.5 * (psi_star[k] + psi_star[kf]);
            psi_star[k] = avg;
            psi_star[kf] = avg;
        }
    }
    let min_ps = psi_star.min();
    if min_ps <= 0.0 {
        return Err(Error::PositivityViolation {
            what: "psi_star".into(),
            min: min_ps,
        });
    }
    let nrm: f64 = (0..nv)
        .map(|k| velocity.weight(k) * psi_star[k] * psi_star[k])
        .sum::<f64>()
        .sqrt();
    psi_star /= nrm;

    // sigma: tabulate raw, then (for symmetric use) average over the parity
    // group and reject tables that disagree with their average.
    if let SigmaSpec::Tabulated { values } = sigma_spec {
        if values.len() != ny * nv * nv {
            return Err(Error::KernelSpec(format!(
                "tabulated sigma has {} entries, expected {}",
                values.len(),
                ny * nv * nv
            )));
        }
    }
    let raw: Vec<DMatrix<f64>> = (0..ny)
        .map(|j| {
            let y = cell.coords(j);
            DMatrix::from_fn(nv, nv, |a, b| {
                eval_sigma_spec(sigma_spec, velocity, cell, v_scale, &y, a, b)
            })
        })
        .collect();

    let sigma = if options.enforce_symmetry {
        let mut defect: f64 = 0.0;
        let mut scale: f64 = 0.0;
        let avg: Vec<DMatrix<f64>> = (0..ny)
            .map(|j| {
                let jf = maps.y_flip[j];
                DMatrix::from_fn(nv, nv, |a, b| {
                    let (af, bf) = (maps.v_flip[a], maps.v_flip[b]);
                    let s = 0.25
                        * (raw[j][(a, b)]
                            + raw[j][(af, bf)]
                            + raw[jf][(a, b)]
                            + raw[jf][(af, bf)]);
                    defect = defect.max((raw[j][(a, b)] - s).abs());
                    scale = scale.max(raw[j][(a, b)].abs());
                    s
                })
            })
            .collect();
        if defect > options.symmetry_tol * scale.max(1.0) {
            return Err(Error::SymmetryViolation {
                what: "sigma(y,v',v) = sigma(y,-v',-v) = sigma(-y,v',v)".into(),
                defect,
                tol: options.symmetry_tol * scale.max(1.0),
            });
        }
        avg
    } else {
        raw
    };

    let min_sigma = sigma
        .iter()
        .map(|m| m.min())
        .fold(f64::INFINITY, f64::min);
    if min_sigma <= 0.0 {
        return Err(Error::PositivityViolation {
            what: "sigma".into(),
            min: min_sigma,
        });
    }

    // Sigma(y,v) so that Q* psi_star = 0 pointwise.
    let sigma_total = CellField::from_fn(ny, nv, |j, k| {
        let num: f64 = (0..nv)
            .map(|i| velocity.weight(i) * sigma[j][(k, i)] * psi_star[i])
            .sum();
        num / psi_star[k]
    });
    let min_st = sigma_total.min();
    if min_st <= 0.0 {
        return Err(Error::PositivityViolation {
            what: "sigma_total".into(),
            min: min_st,
        });
    }

    Ok(ScatteringKernel {
        velocity: velocity.clone(),
        cell: cell.clone(),
        maps,
        sigma,
        sigma_total,
        psi_star,
        spec: sigma_spec.clone(),
        v_scale,
    })
}

impl ScatteringKernel {
    pub fn n_v(&self) -> usize {
        self.velocity.len()
    }

    pub fn n_y(&self) -> usize {
        self.cell.points()
    }

    /// `sigma(y, v_a, v_b)` at an arbitrary cell coordinate. Closed-form
    /// families evaluate exactly; tabulated kernels interpolate
    /// trigonometrically through `ops` (which must live on the cell lattice).
    pub fn sigma_at(&self, ops: &SpectralOps, y: &[f64]) -> DMatrix<f64> {
        match &self.spec {
            SigmaSpec::Tabulated { .. } => {
                let nv = self.n_v();
                let targets: Vec<Vec<f64>> = y.iter().map(|&ya| vec![ya]).collect();
                DMatrix::from_fn(nv, nv, |a, b| {
                    let line: Vec<f64> = (0..self.n_y()).map(|j| self.sigma[j][(a, b)]).collect();
                    ops.resample(&line, &targets)[0]
                })
            }
            spec => {
                let nv = self.n_v();
                DMatrix::from_fn(nv, nv, |a, b| {
                    eval_sigma_spec(spec, &self.velocity, &self.cell, self.v_scale, y, a, b)
                })
            }
        }
    }

    /// Derived `Sigma(y, v)` at an arbitrary cell coordinate, from the same
    /// construction as on the grid so conservation holds there too.
    pub fn sigma_total_at(&self, ops: &SpectralOps, y: &[f64]) -> DVector<f64> {
        let s = self.sigma_at(ops, y);
        let nv = self.n_v();
        DVector::from_fn(nv, |k, _| {
            let num: f64 = (0..nv)
                .map(|i| self.velocity.weight(i) * s[(k, i)] * self.psi_star[i])
                .sum();
            num / self.psi_star[k]
        })
    }

    /// Residual of `Q* psi_star = 0`, which the construction of
    /// `sigma_total` makes vanish identically.
    pub fn qstar_equilibrium_residual(&self) -> f64 {
        let nv = self.n_v();
        let mut worst: f64 = 0.0;
        for j in 0..self.n_y() {
            for k in 0..nv {
                let gain: f64 = (0..nv)
                    .map(|i| self.velocity.weight(i) * self.sigma[j][(k, i)] * self.psi_star[i])
                    .sum();
                worst = worst.max((self.sigma_total[(j, k)] * self.psi_star[k] - gain).abs());
            }
        }
        worst
    }

    /// Write sigma, sigma_total and psi_star tables as CSV for debugging.
    pub fn dump_csv(&self, dir: &std::path::Path) -> Result<()> {
        use std::io::Write;
        std::fs::create_dir_all(dir)?;
        let mut f = std::fs::File::create(dir.join("sigma.csv"))?;
        writeln!(f, "y_index,vprime_index,v_index,value")?;
        for j in 0..self.n_y() {
            for a in 0..self.n_v() {
                for b in 0..self.n_v() {
                    writeln!(f, "{j},{a},{b},{:.17e}", self.sigma[j][(a, b)])?;
                }
            }
        }
        let mut f = std::fs::File::create(dir.join("sigma_total.csv"))?;
        writeln!(f, "y_index,v_index,value")?;
        for j in 0..self.n_y() {
            for k in 0..self.n_v() {
                writeln!(f, "{j},{k},{:.17e}", self.sigma_total[(j, k)])?;
            }
        }
        let mut f = std::fs::File::create(dir.join("psi_star.csv"))?;
        writeln!(f, "v_index,value")?;
        for k in 0..self.n_v() {
            writeln!(f, "{k},{:.17e}", self.psi_star[k])?;
        }
        Ok(())
    }
}

/// Residuals of every standing assumption, reported rather than enforced.
#[derive(Debug, Clone, Serialize)]
pub struct AssumptionReport {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub sigma_total_min: f64,
    pub psi_star_min: f64,
    /// max defect of `sigma(y,v',v) = sigma(y,-v',-v)`.
    pub sigma_v_reciprocity: f64,
    /// max defect of `sigma(y,v',v) = sigma(-y,v',v)`.
    pub sigma_y_evenness: f64,
    pub sigma_total_v_evenness: f64,
    pub sigma_total_y_evenness: f64,
    pub psi_star_evenness: f64,
    pub psi_star_normalization: f64,
    pub qstar_equilibrium_residual: f64,
    pub pass: bool,
}

/// Check (H1)-(H4) residuals on a built kernel.
pub fn check_assumptions(k: &ScatteringKernel) -> AssumptionReport {
    let nv = k.n_v();
    let ny = k.n_y();
    let mut sigma_min = f64::INFINITY;
    let mut sigma_max: f64 = 0.0;
    let mut v_rec: f64 = 0.0;
    let mut y_even: f64 = 0.0;
    for j in 0..ny {
        let jf = k.maps.y_flip[j];
        for a in 0..nv {
            for b in 0..nv {
                let s = k.sigma[j][(a, b)];
                sigma_min = sigma_min.min(s);
                sigma_max = sigma_max.max(s.abs());
                v_rec = v_rec.max((s - k.sigma[j][(k.maps.v_flip[a], k.maps.v_flip[b])]).abs());
                y_even = y_even.max((s - k.sigma[jf][(a, b)]).abs());
            }
        }
    }
    let mut st_v: f64 = 0.0;
    let mut st_y: f64 = 0.0;
    for j in 0..ny {
        let jf = k.maps.y_flip[j];
        for b in 0..nv {
            st_v = st_v.max((k.sigma_total[(j, b)] - k.sigma_total[(j, k.maps.v_flip[b])]).abs());
            st_y = st_y.max((k.sigma_total[(j, b)] - k.sigma_total[(jf, b)]).abs());
        }
    }
    let ps_even = (0..nv)
        .map(|b| (k.psi_star[b] - k.psi_star[k.maps.v_flip[b]]).abs())
        .fold(0.0_f64, f64::max);
    let ps_norm = ((0..nv)
        .map(|b| k.velocity.weight(b) * k.psi_star[b] * k.psi_star[b])
        .sum::<f64>()
        - 1.0)
        .abs();
    let qres = k.qstar_equilibrium_residual();
    let scale = sigma_max.max(1.0);
    let pass = sigma_min > 0.0
        && k.sigma_total.min() > 0.0
        && k.psi_star.min() > 0.0
        && v_rec <= 1e-12 * scale
        && y_even <= 1e-12 * scale
        && st_v <= 1e-12 * scale
        && st_y <= 1e-12 * scale
        && ps_even <= 1e-13
        && ps_norm <= 1e-13
        && qres <= 1e-13 * scale;
    AssumptionReport {
        sigma_min,
        sigma_max,
        sigma_total_min: k.sigma_total.min(),
        psi_star_min: k.psi_star.min(),
        sigma_v_reciprocity: v_rec,
        sigma_y_evenness: y_even,
        sigma_total_v_evenness: st_v,
        sigma_total_y_evenness: st_y,
        psi_star_evenness: ps_even,
        psi_star_normalization: ps_norm,
        qstar_equilibrium_residual: qres,
        pass,
    }
}
