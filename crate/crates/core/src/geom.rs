//! Axis-aligned boxes and small geometric helpers in runtime dimension d ≤ 5.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;

/// Highest spatial dimension the lab supports (memory: grids and window
/// volumes grow like N^d).
pub const MAX_DIM: usize = 5;

/// Closed axis-aligned box `[lo_1, hi_1] x ... x [lo_d, hi_d]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl AxisBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.is_empty() || lo.len() > MAX_DIM {
            return Err(Error::invalid(format!(
                "box dimension must be 1..={MAX_DIM}, got {}",
                lo.len()
            )));
        }
        if lo.len() != hi.len() {
            return Err(Error::invalid("box lo/hi dimension mismatch"));
        }
        if lo.iter().zip(&hi).any(|(a, b)| a > b || !a.is_finite() || !b.is_finite()) {
            return Err(Error::invalid("box needs finite lo <= hi per axis"));
        }
        Ok(AxisBox { lo, hi })
    }

    /// Cube `[-h, h]^d`.
    pub fn centered_cube(d: usize, h: f64) -> Result<Self> {
        AxisBox::new(vec![-h; d], vec![h; d])
    }

    /// Cube `[0, side]^d`.
    pub fn unit_cube(d: usize) -> Result<Self> {
        AxisBox::new(vec![0.0; d], vec![1.0; d])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn side(&self, axis: usize) -> f64 {
        self.hi[axis] - self.lo[axis]
    }

    pub fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).product()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(&xi, (&a, &b))| xi >= a && xi <= b)
    }

    /// Box enlarged by `pad >= 0` on every side.
    pub fn expanded(&self, pad: f64) -> AxisBox {
        assert!(pad >= 0.0, "pad must be nonnegative");
        AxisBox {
            lo: self.lo.iter().map(|a| a - pad).collect(),
            hi: self.hi.iter().map(|b| b + pad).collect(),
        }
    }

    /// Box scaled by `k > 0` about the origin.
    pub fn scaled(&self, k: f64) -> AxisBox {
        assert!(k > 0.0);
        AxisBox {
            lo: self.lo.iter().map(|a| a * k).collect(),
            hi: self.hi.iter().map(|b| b * k).collect(),
        }
    }
}

impl fmt::Display for AxisBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for i in 0..self.dim() {
            if i > 0 {
                write!(f, " x ")?;
            }
            write!(f, "[{}, {}]", self.lo[i], self.hi[i])?;
        }
        write!(f, "]")
    }
}

/// Squared Euclidean distance.
pub fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Euclidean norm.
pub fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Squared distance on the torus `(R / period Z)^d` (minimum-image convention).
pub fn torus_dist_sq(a: &[f64], b: &[f64], period: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let mut dxy = (x - y).rem_euclid(period);
            if dxy > period / 2.0 {
                dxy = period - dxy;
            }
            dxy * dxy
        })
        .sum()
}

/// Volume of the radius-`r` ball in dimension `d`: π^{d/2} r^d / Γ(1 + d/2).
pub fn ball_volume(d: usize, r: f64) -> f64 {
    use statrs::function::gamma::gamma;
    let df = d as f64;
    std::f64::consts::PI.powf(df / 2.0) / gamma(1.0 + df / 2.0) * r.powi(d as i32)
}
