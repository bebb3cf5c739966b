//! Periodic lattice `[0, side)^d` with `n` cells per axis and an exact
//! spectral heat semigroup on it.
//!
//! Fields are flat `Vec<f64>` in C order (last axis fastest). The heat
//! operator diagonalises in Fourier modes, so applying `S_t` is one forward
//! FFT sweep, a symbol multiply `exp(-t |ξ|^2 / 2)`, and an inverse sweep;
//! composition `S_s S_t = S_{s+t}` holds to rounding.

use crate::error::{Error, Result};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

/// Total-cell cap: 2^25 cells ≈ 0.8 GB of complex scratch. Guards 1-core lab
/// machines against accidental n^d blowups in d >= 4.
const MAX_CELLS: usize = 1 << 25;

#[derive(Debug, Clone, PartialEq)]
pub struct TorusGrid {
    pub d: usize,
    pub n: usize,
    pub side: f64,
}

impl TorusGrid {
    pub fn new(d: usize, n: usize, side: f64) -> Result<Self> {
        if d == 0 || d > crate::geom::MAX_DIM {
            return Err(Error::invalid(format!("grid dimension {d} out of range")));
        }
        if n < 2 || !side.is_finite() || side <= 0.0 {
            return Err(Error::invalid("grid needs n >= 2 and side > 0"));
        }
        let cells = (n as u128).pow(d as u32);
        if cells > MAX_CELLS as u128 {
            return Err(Error::ResourceLimit(format!(
                "grid {n}^{d} = {cells} cells exceeds cap {MAX_CELLS}"
            )));
        }
        Ok(TorusGrid { d, n, side })
    }

    pub fn len(&self) -> usize {
        self.n.pow(self.d as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self) -> f64 {
        self.side / self.n as f64
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.d as i32)
    }

    pub fn volume(&self) -> f64 {
        self.side.powi(self.d as i32)
    }

    /// Decode flat index into per-axis indices (C order).
    pub fn coords(&self, mut idx: usize, out: &mut [usize]) {
        for a in (0..self.d).rev() {
            out[a] = idx % self.n;
            idx /= self.n;
        }
    }

    /// Cell centre of the flat index.
    pub fn center(&self, idx: usize, out: &mut [f64]) {
        let h = self.spacing();
        let mut rem = idx;
        for a in (0..self.d).rev() {
            out[a] = (rem % self.n) as f64 * h + 0.5 * h;
            rem /= self.n;
        }
    }

    /// Evaluate `f` at every cell centre.
    pub fn sample(&self, f: &mut dyn FnMut(&[f64]) -> f64) -> Vec<f64> {
        let mut x = vec![0.0; self.d];
        (0..self.len())
            .map(|i| {
                self.center(i, &mut x);
                f(&x)
            })
            .collect()
    }

    /// ⟨Lebesgue, field⟩ = Σ field · h^d.
    pub fn integral(&self, field: &[f64]) -> f64 {
        debug_assert_eq!(field.len(), self.len());
        crate::estimator::pairwise_sum(field) * self.cell_volume()
    }

    /// Spatial mean of the field.
    pub fn mean(&self, field: &[f64]) -> f64 {
        self.integral(field) / self.volume()
    }
}

/// Spectral heat semigroup on a [`TorusGrid`]; owns FFT plans and scratch.
pub struct HeatOperator {
    pub grid: TorusGrid,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    freq_sq: Vec<f64>,
    buf: Vec<Complex64>,
    line: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

impl HeatOperator {
    pub fn new(grid: TorusGrid) -> Self {
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(grid.n);
        let inv = planner.plan_fft_inverse(grid.n);
        let scratch_len = fwd
            .get_inplace_scratch_len()
            .max(inv.get_inplace_scratch_len());
        // squared angular frequency per mode index: (2π m̃ / side)^2
        let freq_sq = (0..grid.n)
            .map(|i| {
                let m = if i <= grid.n / 2 {
                    i as f64
                } else {
                    i as f64 - grid.n as f64
                };
                let xi = 2.0 * std::f64::consts::PI * m / grid.side;
                xi * xi
            })
            .collect();
        let len = grid.len();
        HeatOperator {
            fwd,
            inv,
            freq_sq,
            buf: vec![Complex64::default(); len],
            line: vec![Complex64::default(); grid.n],
            scratch: vec![Complex64::default(); scratch_len],
            grid,
        }
    }

    fn fft_all_axes(&mut self, forward: bool) {
        let n = self.grid.n;
        let total = self.grid.len();
        let plan = if forward { &self.fwd } else { &self.inv };
        for axis in 0..self.grid.d {
            let stride = n.pow((self.grid.d - 1 - axis) as u32);
            let n_lines = total / n;
            if stride == 1 {
                for chunk in self.buf.chunks_exact_mut(n) {
                    plan.process_with_scratch(chunk, &mut self.scratch);
                }
            } else {
                for l in 0..n_lines {
                    let outer = l / stride;
                    let inner = l % stride;
                    let base = outer * stride * n + inner;
                    for j in 0..n {
                        self.line[j] = self.buf[base + j * stride];
                    }
                    plan.process_with_scratch(&mut self.line, &mut self.scratch);
                    for j in 0..n {
                        self.buf[base + j * stride] = self.line[j];
                    }
                }
            }
        }
    }

    /// Apply `S_t` in place. `t = 0` is the identity (up to FFT roundtrip).
    pub fn apply(&mut self, field: &mut [f64], t: f64) {
        assert!(t >= 0.0, "heat semigroup needs t >= 0");
        assert_eq!(field.len(), self.grid.len());
        if t == 0.0 {
            return;
        }
        for (c, &x) in self.buf.iter_mut().zip(field.iter()) {
            *c = Complex64::new(x, 0.0);
        }
        self.fft_all_axes(true);

        let n = self.grid.n;
        let d = self.grid.d;
        let norm = 1.0 / self.grid.len() as f64;
        // multiply by exp(-t |ξ|^2 / 2) / n^d, decoding mode indices on the fly
        let mut idx = vec![0usize; d];
        for (flat, c) in self.buf.iter_mut().enumerate() {
            let mut rem = flat;
            let mut s = 0.0;
            for a in (0..d).rev() {
                idx[a] = rem % n;
                rem /= n;
                s += self.freq_sq[idx[a]];
            }
            *c *= (-(t / 2.0) * s).exp() * norm;
        }

        self.fft_all_axes(false);
        for (x, c) in field.iter_mut().zip(self.buf.iter()) {
            *x = c.re;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn rejects_oversized_grids() {
        assert!(TorusGrid::new(3, 512, 1.0).is_err());
        assert!(TorusGrid::new(5, 64, 1.0).is_err());
        assert!(TorusGrid::new(3, 128, 1.0).is_ok());
    }

    #[test]
    fn constants_are_invariant() {
        let grid = TorusGrid::new(2, 16, 1.0).unwrap();
        let mut op = HeatOperator::new(grid.clone());
        let mut field = vec![3.25; grid.len()];
        op.apply(&mut field, 0.37);
        for &v in &field {
            assert_relative_eq!(v, 3.25, max_relative = 1e-12);
        }
    }

    #[test]
    fn mass_is_conserved_and_field_smooths() {
        let grid = TorusGrid::new(2, 32, 2.0).unwrap();
        let mut op = HeatOperator::new(grid.clone());
        let mut field = grid.sample(&mut |x| if x[0] < 1.0 { 1.0 } else { 0.0 });
        let mass0 = grid.integral(&field);
        let var0: f64 = {
            let m = grid.mean(&field);
            field.iter().map(|v| (v - m) * (v - m)).sum()
        };
        op.apply(&mut field, 0.05);
        let mass1 = grid.integral(&field);
        let var1: f64 = {
            let m = grid.mean(&field);
            field.iter().map(|v| (v - m) * (v - m)).sum()
        };
        assert_relative_eq!(mass0, mass1, max_relative = 1e-10);
        assert!(var1 < var0, "heat flow must contract spatial variance");
    }

    #[test]
    fn semigroup_composition() {
        let grid = TorusGrid::new(1, 64, 1.0).unwrap();
        let mut op = HeatOperator::new(grid.clone());
        let init = grid.sample(&mut |x| (2.0 * std::f64::consts::PI * x[0]).sin().powi(2));
        let mut once = init.clone();
        op.apply(&mut once, 0.3);
        let mut twice = init.clone();
        op.apply(&mut twice, 0.1);
        op.apply(&mut twice, 0.2);
        for (a, b) in once.iter().zip(&twice) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn single_mode_decays_at_exact_rate() {
        // S_t e^{i ξ x} = e^{-ξ^2 t / 2} e^{i ξ x}; test with the real part.
        let grid = TorusGrid::new(1, 32, 2.0).unwrap();
        let mut op = HeatOperator::new(grid.clone());
        let xi = 2.0 * std::f64::consts::PI * 3.0 / 2.0; // mode m=3
        let mut field = grid.sample(&mut |x| (xi * x[0]).cos());
        let t = 0.11;
        op.apply(&mut field, t);
        let expected = grid.sample(&mut |x| ((-xi * xi * t / 2.0).exp()) * (xi * x[0]).cos());
        for (a, b) in field.iter().zip(&expected) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }
}
