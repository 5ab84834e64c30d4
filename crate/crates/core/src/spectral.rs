//! Fourier-spectral operations on periodic uniform lattices.
//!
//! All periodic derivatives in the crate go through this module, so that
//! discrete identities (a spectral derivative sums to zero over the grid,
//! the differentiation matrix is exactly antisymmetric) hold wherever they
//! are relied on. The Nyquist mode of first derivatives is zeroed, the
//! standard choice that keeps the operator real and antisymmetric on an
//! even number of points.

use nalgebra::DMatrix;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

/// A uniform periodic lattice: `n` points per axis on a torus of edge
/// length `period`, in `dim` dimensions, `n^dim` points total.
///
/// Flattened indexing is axis-0 fastest: `j = j_0 + n j_1 + n^2 j_2 + ...`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    pub dim: usize,
    pub n: usize,
    pub period: f64,
}

impl Lattice {
    pub fn new(dim: usize, n: usize, period: f64) -> Self {
        assert!(dim >= 1 && n >= 2 && period > 0.0);
        Self { dim, n, period }
    }

    pub fn points(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn spacing(&self) -> f64 {
        self.period / self.n as f64
    }

    /// Volume element of one lattice cell, `(period/n)^dim`.
    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.dim as i32)
    }

    /// Coordinates of the flattened point `j`.
    pub fn coords(&self, mut j: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim);
        for _ in 0..self.dim {
            out.push((j % self.n) as f64 * self.spacing());
            j /= self.n;
        }
        out
    }

    /// Index of the reflected point `-y mod period`, exact on the lattice.
    pub fn flip_index(&self, mut j: usize) -> usize {
        let mut out = 0;
        let mut stride = 1;
        for _ in 0..self.dim {
            let ja = j % self.n;
            let fa = (self.n - ja) % self.n;
            out += fa * stride;
            stride *= self.n;
            j /= self.n;
        }
        out
    }

    /// Stride of axis `a` in the flattened layout.
    pub fn stride(&self, axis: usize) -> usize {
        self.n.pow(axis as u32)
    }
}

/// Signed integer wavenumbers in FFT order for length `n`.
fn signed_modes(n: usize) -> Vec<i64> {
    (0..n)
        .map(|j| if j <= n / 2 { j as i64 } else { j as i64 - n as i64 })
        .collect()
}

/// FFT-backed spectral operator set for one lattice.
pub struct SpectralOps {
    pub lattice: Lattice,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for SpectralOps {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpectralOps")
            .field("lattice", &self.lattice)
            .finish()
    }
}

impl SpectralOps {
    pub fn new(lattice: Lattice) -> Self {
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(lattice.n);
        let ifft = planner.plan_fft_inverse(lattice.n);
        Self { lattice, fft, ifft }
    }

    fn line_spectrum(&self, line: &[Complex<f64>]) -> Vec<Complex<f64>> {
        let mut buf = line.to_vec();
        self.fft.process(&mut buf);
        buf
    }

    /// Apply a diagonal Fourier multiplier along `axis` to a flattened
    /// real field of `lattice.points()` values. The multiplier is given in
    /// FFT order together with the signed mode index.
    fn apply_axis_multiplier<F>(&self, data: &[f64], axis: usize, mult: F) -> Vec<f64>
    where
        F: Fn(i64) -> Complex<f64>,
    {
        let n = self.lattice.n;
        let total = self.lattice.points();
        assert_eq!(data.len(), total);
        let stride = self.lattice.stride(axis);
        let modes = signed_modes(n);
        let weights: Vec<Complex<f64>> = modes.iter().map(|&k| mult(k)).collect();
        let mut out = vec![0.0; total];
        let mut line = vec![Complex::new(0.0, 0.0); n];
        // Enumerate all lines along `axis`: indices whose axis-coordinate is 0.
        let outer = total / n;
        for l in 0..outer {
            // Recover the base index of line l: insert a zero digit at `axis`.
            let below = l % stride;
            let above = l / stride;
            let base = below + above * stride * n;
            for t in 0..n {
                line[t] = Complex::new(data[base + t * stride], 0.0);
            }
            self.fft.process(&mut line);
            for t in 0..n {
                line[t] *= weights[t];
            }
            self.ifft.process(&mut line);
            let inv = 1.0 / n as f64;
            for t in 0..n {
                out[base + t * stride] = line[t].re * inv;
            }
        }
        out
    }

    /// First derivative along `axis` (Nyquist mode zeroed).
    pub fn derivative_axis(&self, data: &[f64], axis: usize) -> Vec<f64> {
        let n = self.lattice.n;
        let scale = 2.0 * std::f64::consts::PI / self.lattice.period;
        self.apply_axis_multiplier(data, axis, |k| {
            if n % 2 == 0 && k == (n / 2) as i64 {
                Complex::new(0.0, 0.0)
            } else {
                Complex::new(0.0, k as f64 * scale)
            }
        })
    }

    /// Dense matrix of `derivative_axis` on the flattened lattice, built by
    /// applying the FFT path to basis vectors so both routes agree exactly.
    pub fn derivative_matrix(&self, axis: usize) -> DMatrix<f64> {
        let total = self.lattice.points();
        let mut m = DMatrix::zeros(total, total);
        let mut e = vec![0.0; total];
        for j in 0..total {
            e[j] = 1.0;
            let col = self.derivative_axis(&e, axis);
            for i in 0..total {
                m[(i, j)] = col[i];
            }
            e[j] = 0.0;
        }
        m
    }

    /// Solve `(1 - div(D grad)) u = rhs` with a constant `dim x dim` tensor,
    /// exactly per Fourier mode.
    pub fn solve_reaction_diffusion(&self, rhs: &[f64], tensor: &DMatrix<f64>) -> Vec<f64> {
        let freq = |k: i64| 2.0 * std::f64::consts::PI * k as f64 / self.lattice.period;
        self.solve_multiplier(rhs, |kappa: &[f64]| {
            let mut quad = 0.0;
            for a in 0..self.lattice.dim {
                for b in 0..self.lattice.dim {
                    quad += kappa[a] * tensor[(a, b)] * kappa[b];
                }
            }
            1.0 / (1.0 + quad)
        }, freq)
    }

    /// Apply a scalar multiplier `m(kappa)` over the full d-dimensional
    /// spectrum of a real field.
    pub fn solve_multiplier<F, G>(&self, rhs: &[f64], mult: F, freq: G) -> Vec<f64>
    where
        F: Fn(&[f64]) -> f64,
        G: Fn(i64) -> f64,
    {
        let total = self.lattice.points();
        assert_eq!(rhs.len(), total);
        let mut buf: Vec<Complex<f64>> = rhs.iter().map(|&x| Complex::new(x, 0.0)).collect();
        // d-dimensional FFT, axis by axis.
        for axis in 0..self.lattice.dim {
            self.fft_axis_complex(&mut buf, axis, true);
        }
        let modes = signed_modes(self.lattice.n);
        let mut kappa = vec![0.0; self.lattice.dim];
        for (j, val) in buf.iter_mut().enumerate() {
            let mut idx = j;
            for a in 0..self.lattice.dim {
                kappa[a] = freq(modes[idx % self.lattice.n]);
                idx /= self.lattice.n;
            }
            *val *= mult(&kappa);
        }
        for axis in 0..self.lattice.dim {
            self.fft_axis_complex(&mut buf, axis, false);
        }
        let inv = 1.0 / total as f64;
        buf.iter().map(|c| c.re * inv).collect()
    }

    fn fft_axis_complex(&self, data: &mut [Complex<f64>], axis: usize, forward: bool) {
        let n = self.lattice.n;
        let total = data.len();
        let stride = self.lattice.stride(axis);
        let outer = total / n;
        let mut line = vec![Complex::new(0.0, 0.0); n];
        for l in 0..outer {
            let below = l % stride;
            let above = l / stride;
            let base = below + above * stride * n;
            for t in 0..n {
                line[t] = data[base + t * stride];
            }
            if forward {
                self.fft.process(&mut line);
            } else {
                self.ifft.process(&mut line);
            }
            for t in 0..n {
                data[base + t * stride] = line[t];
            }
        }
    }

    /// Discrete Sobolev norm `H^k` via the multiplier `(1 + |kappa|^2)^k`
    /// on the spectrum, normalized so that `k = 0` is the L2 norm with the
    /// lattice volume element.
    pub fn sobolev_norm(&self, data: &[f64], k: i32) -> f64 {
        let total = self.lattice.points();
        assert_eq!(data.len(), total);
        let mut buf: Vec<Complex<f64>> = data.iter().map(|&x| Complex::new(x, 0.0)).collect();
        for axis in 0..self.lattice.dim {
            self.fft_axis_complex(&mut buf, axis, true);
        }
        let modes = signed_modes(self.lattice.n);
        let freq = |m: i64| 2.0 * std::f64::consts::PI * m as f64 / self.lattice.period;
        let mut acc = 0.0;
        for (j, c) in buf.iter().enumerate() {
            let mut idx = j;
            let mut k2 = 0.0;
            for _ in 0..self.lattice.dim {
                let kap = freq(modes[idx % self.lattice.n]);
                k2 += kap * kap;
                idx /= self.lattice.n;
            }
            acc += (1.0 + k2).powi(k) * c.norm_sqr();
        }
        // Parseval: sum |c|^2 / n_total = sum |f|^2 over grid.
        (acc / total as f64 * self.lattice.cell_volume()).sqrt()
    }

    /// Evaluate the trigonometric interpolant of a single-axis line at
    /// arbitrary coordinates. `values.len()` must equal `lattice.n`.
    pub fn interp_line(&self, values: &[f64], targets: &[f64]) -> Vec<f64> {
        let n = self.lattice.n;
        assert_eq!(values.len(), n);
        let spec = self.line_spectrum(
            &values
                .iter()
                .map(|&x| Complex::new(x, 0.0))
                .collect::<Vec<_>>(),
        );
        let two_pi = 2.0 * std::f64::consts::PI / self.lattice.period;
        targets
            .iter()
            .map(|&y| {
                let mut acc = spec[0].re;
                for k in 1..n / 2 {
                    let phase = two_pi * k as f64 * y;
                    acc += 2.0 * (spec[k].re * phase.cos() - spec[k].im * phase.sin());
                }
                if n % 2 == 0 {
                    acc += spec[n / 2].re * (two_pi * (n / 2) as f64 * y).cos();
                } else if n > 1 {
                    let k = n / 2;
                    let phase = two_pi * k as f64 * y;
                    acc += 2.0 * (spec[k].re * phase.cos() - spec[k].im * phase.sin());
                }
                acc / n as f64
            })
            .collect()
    }

    /// Resample a flattened d-dimensional field onto the tensor grid of
    /// per-axis target coordinates, by axis-wise trigonometric interpolation.
    /// Exact (up to roundoff) when targets are lattice points.
    pub fn resample(&self, data: &[f64], targets_per_axis: &[Vec<f64>]) -> Vec<f64> {
        assert_eq!(targets_per_axis.len(), self.lattice.dim);
        let mut shape: Vec<usize> = vec![self.lattice.n; self.lattice.dim];
        let mut cur = data.to_vec();
        for axis in 0..self.lattice.dim {
            cur = resample_axis(self, &cur, &shape, axis, &targets_per_axis[axis]);
            shape[axis] = targets_per_axis[axis].len();
        }
        cur
    }
}

fn resample_axis(
    ops: &SpectralOps,
    data: &[f64],
    shape: &[usize],
    axis: usize,
    targets: &[f64],
) -> Vec<f64> {
    let n = shape[axis];
    assert_eq!(n, ops.lattice.n, "resample must run on the source axis length");
    let m = targets.len();
    let stride: usize = shape[..axis].iter().product();
    let outer: usize = data.len() / n;
    let mut new_shape = shape.to_vec();
    new_shape[axis] = m;
    let new_total: usize = new_shape.iter().product();
    let mut out = vec![0.0; new_total];
    let new_stride: usize = new_shape[..axis].iter().product();
    let mut line = vec![0.0; n];
    for l in 0..outer {
        let below = l % stride;
        let above = l / stride;
        let base = below + above * stride * n;
        for t in 0..n {
            line[t] = data[base + t * stride];
        }
        let vals = ops.interp_line(&line, targets);
        let new_base = below + above * new_stride * m;
        for t in 0..m {
            out[new_base + t * new_stride] = vals[t];
        }
    }
    out
}

/// The non-constant "corner" modes of an even lattice: products of per-axis
/// Nyquist sawtooths. A spectral first derivative annihilates every one of
/// them, so operators composed from first derivatives with y-independent
/// coefficients are singular along these directions and need them deflated.
pub fn corner_modes(lattice: &Lattice) -> Vec<Vec<f64>> {
    let total = lattice.points();
    let mut out = Vec::new();
    for mask in 1..(1usize << lattice.dim) {
        let mut v = vec![1.0; total];
        for (j, val) in v.iter_mut().enumerate() {
            let mut idx = j;
            let mut sign = 1.0;
            for a in 0..lattice.dim {
                let ja = idx % lattice.n;
                idx /= lattice.n;
                if mask & (1 << a) != 0 && ja % 2 == 1 {
                    sign = -sign;
                }
            }
            *val = sign;
        }
        out.push(v);
    }
    out
}

/// Least-squares slope of `ln y` against `ln x`, with its standard error.
/// Used everywhere a convergence order is fitted.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    pub stderr: f64,
}

pub fn fit_loglog(xs: &[f64], ys: &[f64]) -> LogLogFit {
    assert_eq!(xs.len(), ys.len());
    assert!(xs.len() >= 2, "need at least two points to fit a slope");
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.max(1e-300).ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = lx
        .iter()
        .zip(&ly)
        .map(|(x, y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum();
    let dof = (lx.len() as f64 - 2.0).max(1.0);
    let stderr = (ss_res / dof / sxx).sqrt();
    LogLogFit {
        slope,
        intercept,
        stderr,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn derivative_of_single_mode_is_exact() {
        let ops = SpectralOps::new(Lattice::new(1, 32, 1.0));
        let two_pi = 2.0 * std::f64::consts::PI;
        let f: Vec<f64> = (0..32).map(|j| (two_pi * 3.0 * j as f64 / 32.0).sin()).collect();
        let df = ops.derivative_axis(&f, 0);
        for j in 0..32 {
            let exact = two_pi * 3.0 * (two_pi * 3.0 * j as f64 / 32.0).cos();
            assert_relative_eq!(df[j], exact, max_relative = 1e-12, epsilon = 1e-10);
        }
    }

    #[test]
    fn derivative_sums_to_zero_and_matrix_is_antisymmetric() {
        let ops = SpectralOps::new(Lattice::new(1, 16, 1.0));
        let f: Vec<f64> = (0..16).map(|j| (j as f64 * 0.37).sin().powi(2) + 0.1 * j as f64 % 1.0).collect();
        let df = ops.derivative_axis(&f, 0);
        assert!(df.iter().sum::<f64>().abs() < 1e-12);
        let m = ops.derivative_matrix(0);
        let asym = (&m + m.transpose()).norm();
        assert!(asym < 1e-11, "antisymmetry defect {asym}");
    }

    #[test]
    fn two_dimensional_derivative_acts_per_axis() {
        let ops = SpectralOps::new(Lattice::new(2, 8, 1.0));
        let two_pi = 2.0 * std::f64::consts::PI;
        let total = ops.lattice.points();
        let mut f = vec![0.0; total];
        for j in 0..total {
            let c = ops.lattice.coords(j);
            f[j] = (two_pi * c[0]).cos() * (two_pi * 2.0 * c[1]).sin();
        }
        let d1 = ops.derivative_axis(&f, 1);
        for j in 0..total {
            let c = ops.lattice.coords(j);
            let exact = (two_pi * c[0]).cos() * two_pi * 2.0 * (two_pi * 2.0 * c[1]).cos();
            assert_relative_eq!(d1[j], exact, max_relative = 1e-11, epsilon = 1e-10);
        }
    }

    #[test]
    fn reaction_diffusion_single_mode_closed_form() {
        // (1 - d^2/dx^2) u = cos(2 pi x)  =>  u = cos(2 pi x) / (1 + 4 pi^2)
        let ops = SpectralOps::new(Lattice::new(1, 64, 1.0));
        let two_pi = 2.0 * std::f64::consts::PI;
        let rhs: Vec<f64> = (0..64).map(|j| (two_pi * j as f64 / 64.0).cos()).collect();
        let d = DMatrix::from_element(1, 1, 1.0);
        let u = ops.solve_reaction_diffusion(&rhs, &d);
        for j in 0..64 {
            let exact = (two_pi * j as f64 / 64.0).cos() / (1.0 + two_pi * two_pi);
            assert_relative_eq!(u[j], exact, max_relative = 1e-12, epsilon = 1e-13);
        }
    }

    #[test]
    fn interpolation_reproduces_grid_values_and_band_limited_fields() {
        let ops = SpectralOps::new(Lattice::new(1, 16, 1.0));
        let two_pi = 2.0 * std::f64::consts::PI;
        let f: Vec<f64> = (0..16)
            .map(|j| 1.0 + (two_pi * j as f64 / 16.0).cos() - 0.4 * (two_pi * 3.0 * j as f64 / 16.0).sin())
            .collect();
        // On-grid targets reproduce values.
        let grid: Vec<f64> = (0..16).map(|j| j as f64 / 16.0).collect();
        let v = ops.interp_line(&f, &grid);
        for j in 0..16 {
            assert_relative_eq!(v[j], f[j], epsilon = 1e-12);
        }
        // Off-grid targets reproduce the band-limited function.
        let targets = [0.013, 0.451, 0.77];
        let v = ops.interp_line(&f, &targets);
        for (i, &y) in targets.iter().enumerate() {
            let exact = 1.0 + (two_pi * y).cos() - 0.4 * (two_pi * 3.0 * y).sin();
            assert_relative_eq!(v[i], exact, epsilon = 1e-12);
        }
    }

    #[test]
    fn loglog_fit_recovers_power_law() {
        let xs = [0.2, 0.1, 0.05, 0.025];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * f64::powf(*x, 2.0)).collect();
        let fit = fit_loglog(&xs, &ys);
        assert_relative_eq!(fit.slope, 2.0, epsilon = 1e-12);
        assert!(fit.stderr < 1e-12);
    }

    #[test]
    fn lattice_flip_is_involution() {
        let lat = Lattice::new(2, 6, 1.0);
        for j in 0..lat.points() {
            assert_eq!(lat.flip_index(lat.flip_index(j)), j);
        }
    }
}
