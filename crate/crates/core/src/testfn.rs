//! Test functions paired against measures and fields.
//!
//! Every kind is nonnegative and bounded; all except the torus constant decay
//! fast enough to be dominated by a multiple of the reference profile
//! `e^{-λ|x|}`, which is what the estimator tails assume.

use crate::error::{Error, Result};
use crate::geom::{norm, AxisBox};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TestFunction {
    /// `amplitude * e^{-lambda |x|}`.
    Exponential { d: usize, lambda: f64, amplitude: f64 },
    /// `amplitude * e^{-|x-center|^2 / (2 sigma^2)}`.
    GaussianBump {
        center: Vec<f64>,
        sigma: f64,
        amplitude: f64,
    },
    /// `amplitude` on `support` shrunk by `ramp`, 0 outside `support`, cubic
    /// smoothstep on the ramp band per axis. `ramp = 0` gives the sharp
    /// indicator.
    Indicator {
        support: AxisBox,
        amplitude: f64,
        ramp: f64,
    },
    /// Constant field on a periodic box (no decay; only meaningful paired with
    /// compactly supported measures or on the torus itself).
    ConstantOnTorus { d: usize, theta: f64 },
}

fn smoothstep(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    s * s * (3.0 - 2.0 * s)
}

impl TestFunction {
    pub fn dim(&self) -> usize {
        match self {
            TestFunction::Exponential { d, .. } => *d,
            TestFunction::GaussianBump { center, .. } => center.len(),
            TestFunction::Indicator { support, .. } => support.dim(),
            TestFunction::ConstantOnTorus { d, .. } => *d,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            TestFunction::Exponential { d, lambda, amplitude } => {
                (1..=crate::geom::MAX_DIM).contains(d) && *lambda > 0.0 && *amplitude >= 0.0
            }
            TestFunction::GaussianBump { center, sigma, amplitude } => {
                !center.is_empty()
                    && center.len() <= crate::geom::MAX_DIM
                    && *sigma > 0.0
                    && *amplitude >= 0.0
            }
            TestFunction::Indicator { support, amplitude, ramp } => {
                *amplitude >= 0.0
                    && *ramp >= 0.0
                    && (0..support.dim()).all(|a| support.side(a) >= 2.0 * ramp)
            }
            TestFunction::ConstantOnTorus { d, theta } => {
                (1..=crate::geom::MAX_DIM).contains(d) && *theta >= 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("bad test function parameters: {self:?}")))
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim());
        match self {
            TestFunction::Exponential { lambda, amplitude, .. } => {
                amplitude * (-lambda * norm(x)).exp()
            }
            TestFunction::GaussianBump { center, sigma, amplitude } => {
                let r2 = crate::geom::dist_sq(x, center);
                amplitude * (-r2 / (2.0 * sigma * sigma)).exp()
            }
            TestFunction::Indicator { support, amplitude, ramp } => {
                let mut v = *amplitude;
                for a in 0..support.dim() {
                    let (lo, hi) = (support.lo[a], support.hi[a]);
                    let xi = x[a];
                    if xi < lo || xi > hi {
                        return 0.0;
                    }
                    if *ramp > 0.0 {
                        let edge = (xi - lo).min(hi - xi);
                        if edge < *ramp {
                            v *= smoothstep(edge / ramp);
                        }
                    }
                }
                v
            }
            TestFunction::ConstantOnTorus { theta, .. } => *theta,
        }
    }

    pub fn sup_norm(&self) -> f64 {
        match self {
            TestFunction::Exponential { amplitude, .. } => *amplitude,
            TestFunction::GaussianBump { amplitude, .. } => *amplitude,
            TestFunction::Indicator { amplitude, .. } => *amplitude,
            TestFunction::ConstantOnTorus { theta, .. } => *theta,
        }
    }

    /// Smallest C with `φ <= C e^{-lambda |x|}` everywhere, if the kind decays
    /// fast enough for that `lambda`. `None` for the torus constant.
    pub fn exp_domination(&self, lambda: f64) -> Option<f64> {
        assert!(lambda > 0.0);
        match self {
            TestFunction::Exponential { lambda: l0, amplitude, .. } => {
                if lambda <= *l0 {
                    Some(*amplitude)
                } else {
                    None
                }
            }
            TestFunction::GaussianBump { center, sigma, amplitude } => {
                // A e^{-r^2/2σ^2} with r >= |x| - |c|:
                // sup_x A e^{λ|x|} e^{-(|x|-|c|)_+^2 / 2σ^2} = A e^{λ|c| + λ^2 σ^2 / 2}
                Some(amplitude * (lambda * norm(center) + lambda * lambda * sigma * sigma / 2.0).exp())
            }
            TestFunction::Indicator { support, amplitude, .. } => {
                let far = support
                    .lo
                    .iter()
                    .zip(&support.hi)
                    .map(|(a, b)| a.abs().max(b.abs()).powi(2))
                    .sum::<f64>()
                    .sqrt();
                Some(amplitude * (lambda * far).exp())
            }
            TestFunction::ConstantOnTorus { .. } => None,
        }
    }

    /// Box outside which the function is below `tol * sup_norm` (used to
    /// truncate quadratures). The torus constant has no such box.
    pub fn quadrature_box(&self, tol: f64) -> Option<AxisBox> {
        assert!(tol > 0.0 && tol < 1.0);
        match self {
            TestFunction::Exponential { d, lambda, .. } => {
                let r = -tol.ln() / lambda;
                Some(AxisBox::centered_cube(*d, r).unwrap())
            }
            TestFunction::GaussianBump { center, sigma, .. } => {
                let r = sigma * (-2.0 * tol.ln()).sqrt();
                let lo = center.iter().map(|c| c - r).collect();
                let hi = center.iter().map(|c| c + r).collect();
                Some(AxisBox::new(lo, hi).unwrap())
            }
            TestFunction::Indicator { support, .. } => Some(support.clone()),
            TestFunction::ConstantOnTorus { .. } => None,
        }
    }

    /// Closed-form heat flow `S_t φ` where available (Gaussian widens, torus
    /// constant is invariant). Returns `None` for kinds without a closed form.
    pub fn heat_flow_closed_form(&self, t: f64, x: &[f64]) -> Option<f64> {
        assert!(t >= 0.0);
        match self {
            TestFunction::GaussianBump { center, sigma, amplitude } => {
                let d = center.len() as f64;
                let s2 = sigma * sigma;
                let v = s2 + t;
                let r2 = crate::geom::dist_sq(x, center);
                Some(amplitude * (s2 / v).powf(d / 2.0) * (-r2 / (2.0 * v)).exp())
            }
            TestFunction::ConstantOnTorus { theta, .. } => Some(*theta),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn indicator_sharp_and_mollified() {
        let sharp = TestFunction::Indicator {
            support: AxisBox::unit_cube(2).unwrap(),
            amplitude: 4.0,
            ramp: 0.0,
        };
        assert_relative_eq!(sharp.eval(&[0.5, 0.5]), 4.0);
        assert_relative_eq!(sharp.eval(&[1.5, 0.5]), 0.0);

        let soft = TestFunction::Indicator {
            support: AxisBox::unit_cube(2).unwrap(),
            amplitude: 1.0,
            ramp: 0.25,
        };
        assert_relative_eq!(soft.eval(&[0.5, 0.5]), 1.0);
        assert_relative_eq!(soft.eval(&[0.125, 0.5]), 0.5, max_relative = 1e-12);
        assert!(soft.eval(&[0.05, 0.5]) < 0.2);
    }

    #[test]
    fn gaussian_heat_flow_closed_form_normalises() {
        let g = TestFunction::GaussianBump {
            center: vec![0.0, 0.0, 0.0],
            sigma: 0.5,
            amplitude: 2.0,
        };
        // at t=0 the closed form is the function itself
        assert_relative_eq!(g.heat_flow_closed_form(0.0, &[0.1, 0.0, 0.0]).unwrap(), g.eval(&[0.1, 0.0, 0.0]));
        // mass is conserved: amplitude*(2π σ^2)^{d/2} before and after
        let mass0 = 2.0 * (2.0 * std::f64::consts::PI * 0.25f64).powf(1.5);
        let t = 0.7;
        let v: f64 = 0.25 + t;
        let amp_t = 2.0 * (0.25f64 / v).powf(1.5);
        let mass_t = amp_t * (2.0 * std::f64::consts::PI * v).powf(1.5);
        assert_relative_eq!(mass0, mass_t, max_relative = 1e-12);
    }

    proptest! {
        #[test]
        fn exp_domination_bounds_pointwise(
            xs in prop::collection::vec(-4.0f64..4.0, 3),
            lambda in 0.2f64..2.0,
        ) {
            let fns = [
                TestFunction::Exponential { d: 3, lambda: 2.5, amplitude: 1.3 },
                TestFunction::GaussianBump { center: vec![0.5, 0.0, -0.5], sigma: 0.7, amplitude: 2.0 },
                TestFunction::Indicator { support: AxisBox::centered_cube(3, 1.0).unwrap(), amplitude: 3.0, ramp: 0.2 },
            ];
            for f in &fns {
                let c = f.exp_domination(lambda).unwrap();
                let bound = c * (-lambda * norm(&xs)).exp();
                prop_assert!(f.eval(&xs) <= bound * (1.0 + 1e-12));
            }
        }
    }
}
