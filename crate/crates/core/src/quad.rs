//! Deterministic quadrature helpers (tensor midpoint, composite Simpson, ball
//! stencils). These back the analytic sides of the validation identities and
//! the fluctuation-functional time integrals.

use crate::geom::{ball_volume, dist_sq, AxisBox};
use std::f64::consts::PI;

/// Tensor-product midpoint rule with `n` nodes per axis.
///
/// Midpoint is deliberate: the integrands include sharp indicators, where
/// midpoint avoids evaluating on the discontinuity and converges O(1/n) with
/// small constants, while staying O(n^2) for smooth integrands.
pub fn midpoint_box(f: &mut dyn FnMut(&[f64]) -> f64, window: &AxisBox, n: usize) -> f64 {
    assert!(n >= 1);
    let d = window.dim();
    let h: Vec<f64> = (0..d).map(|a| window.side(a) / n as f64).collect();
    let cell: f64 = h.iter().product();
    if cell == 0.0 {
        return 0.0;
    }
    let total = n.pow(d as u32);
    let mut x = vec![0.0; d];
    let mut acc = 0.0;
    // pairwise-ish accumulation in blocks to keep rounding mild without
    // allocating n^d intermediates
    let mut block = 0.0;
    let mut count_in_block = 0usize;
    for idx in 0..total {
        let mut rem = idx;
        for a in 0..d {
            let i = rem % n;
            rem /= n;
            x[a] = window.lo[a] + (i as f64 + 0.5) * h[a];
        }
        block += f(&x);
        count_in_block += 1;
        if count_in_block == 4096 {
            acc += block;
            block = 0.0;
            count_in_block = 0;
        }
    }
    (acc + block) * cell
}

/// Composite Simpson rule on `[a, b]` with `n` subintervals (`n` even, >= 2).
pub fn simpson(f: &mut dyn FnMut(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    assert!(n >= 2 && n % 2 == 0, "Simpson needs an even interval count");
    let h = (b - a) / n as f64;
    if h == 0.0 {
        return 0.0;
    }
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

/// Midpoint stencil for the ball `|y| <= radius`: cell centres of an
/// `n`-per-axis grid over the bounding cube, filtered to the ball, each
/// carrying the cell volume as weight. The weight total approaches the ball
/// volume as `n` grows; callers that need an exactly-normalised average can
/// divide by the returned total weight.
pub struct BallStencil {
    pub offsets: Vec<Vec<f64>>,
    pub cell_weight: f64,
}

impl BallStencil {
    pub fn new(d: usize, radius: f64, n: usize) -> Self {
        assert!(n >= 1 && radius > 0.0);
        let h = 2.0 * radius / n as f64;
        let cell_weight = h.powi(d as i32);
        let total = n.pow(d as u32);
        let mut offsets = Vec::new();
        let r2 = radius * radius;
        let mut y = vec![0.0; d];
        for idx in 0..total {
            let mut rem = idx;
            for a in 0..d {
                let i = rem % n;
                rem /= n;
                y[a] = -radius + (i as f64 + 0.5) * h;
            }
            if dist_sq(&y, &vec![0.0; d]) <= r2 {
                offsets.push(y.clone());
            }
        }
        BallStencil { offsets, cell_weight }
    }

    pub fn total_weight(&self) -> f64 {
        self.cell_weight * self.offsets.len() as f64
    }

    /// ∫_{|y-c| <= radius} f(y) dy  ≈  Σ f(c + offset) * cell_weight.
    pub fn integrate(&self, center: &[f64], f: &mut dyn FnMut(&[f64]) -> f64) -> f64 {
        let d = center.len();
        let mut y = vec![0.0; d];
        let mut acc = 0.0;
        for off in &self.offsets {
            for a in 0..d {
                y[a] = center[a] + off[a];
            }
            acc += f(&y);
        }
        acc * self.cell_weight
    }
}

/// Legendre polynomial `P_n` and its derivative at `x`, via the three-term
/// recurrence and the derivative identity `(x^2 - 1) P_n' = n (x P_n - P_{n-1})`.
fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    debug_assert!(n >= 1 && x.abs() < 1.0);
    let mut prev = 1.0; // P_0
    let mut cur = x; // P_1
    for j in 1..n {
        let next = ((2 * j + 1) as f64 * x * cur - j as f64 * prev) / (j + 1) as f64;
        prev = cur;
        cur = next;
    }
    let dp = n as f64 * (x * cur - prev) / (x * x - 1.0);
    (cur, dp)
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`, exact for polynomials of
/// degree `2n - 1`. Nodes are returned in ascending order; roots come from
/// Newton iteration started at the Chebyshev estimates, which converges to
/// machine precision in a handful of steps for any practical `n`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..64 {
            let (p, dp) = legendre_with_derivative(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre_with_derivative(n, x);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        // i = 0 is the largest root; mirror into ascending order.
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

/// Product quadrature on the ball `|y| <= radius`: Gauss–Legendre in the
/// radius against `r^{d-1} dr`, tensored with a degree-five antipodally
/// symmetric rule on the sphere (the `2d` axis points `±e_i` with weight
/// `1/(d(d+2))` and the `2^d` diagonal points `(±1, …, ±1)/√d` with weight
/// `d/((d+2)·2^d)`; these match the sphere moments of `1`, `u_i^2`, `u_i^4`
/// and `u_i^2 u_j^2`, and all odd moments vanish by symmetry). The rule is
/// exact for polynomials of total degree five — in particular it reproduces
/// the ball volume and second moment exactly, with none of the
/// boundary-staircase error of `BallStencil`.
pub struct BallRule {
    pub d: usize,
    pub radius: f64,
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl BallRule {
    pub fn new(d: usize, radius: f64, radial_nodes: usize) -> Self {
        assert!(d >= 1 && radius > 0.0 && radial_nodes >= 1);
        let (gl_nodes, gl_weights) = gauss_legendre(radial_nodes);
        let surface = d as f64 * ball_volume(d, 1.0);
        let axis_weight = 1.0 / (d as f64 * (d + 2) as f64);
        let diag_weight = d as f64 / ((d + 2) as f64 * (1u64 << d) as f64);
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();

        let mut dirs: Vec<(Vec<f64>, f64)> = Vec::with_capacity(2 * d + (1 << d));
        for a in 0..d {
            for s in [1.0, -1.0] {
                let mut u = vec![0.0; d];
                u[a] = s;
                dirs.push((u, axis_weight));
            }
        }
        for mask in 0..(1usize << d) {
            let u: Vec<f64> = (0..d)
                .map(|a| if mask >> a & 1 == 1 { inv_sqrt_d } else { -inv_sqrt_d })
                .collect();
            dirs.push((u, diag_weight));
        }

        let mut points = Vec::with_capacity(radial_nodes * dirs.len());
        let mut weights = Vec::with_capacity(radial_nodes * dirs.len());
        for (x, wr) in gl_nodes.iter().zip(&gl_weights) {
            let r = radius * (x + 1.0) / 2.0;
            let radial = surface * (radius / 2.0) * wr * r.powi(d as i32 - 1);
            for (u, wu) in &dirs {
                points.push(u.iter().map(|c| c * r).collect());
                weights.push(radial * wu);
            }
        }
        BallRule { d, radius, points, weights }
    }

    /// ∫_{|y-c| <= radius} f(y) dy  ≈  Σ w_j f(c + point_j).
    pub fn integrate(&self, center: &[f64], f: &mut dyn FnMut(&[f64]) -> f64) -> f64 {
        let d = center.len();
        let mut y = vec![0.0; d];
        let mut acc = 0.0;
        for (p, w) in self.points.iter().zip(&self.weights) {
            for a in 0..d {
                y[a] = center[a] + p[a];
            }
            acc += w * f(&y);
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn midpoint_integrates_polynomials() {
        let b = AxisBox::new(vec![0.0, 0.0], vec![1.0, 2.0]).unwrap();
        // ∫ x y dx dy over [0,1]x[0,2] = 1/2 * 2 = 1  (midpoint exact for linear per axis)
        let v = midpoint_box(&mut |x| x[0] * x[1], &b, 8);
        assert_relative_eq!(v, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn midpoint_handles_indicator() {
        let b = AxisBox::new(vec![-1.0], vec![1.0]).unwrap();
        let v = midpoint_box(&mut |x| if x[0].abs() <= 0.5 { 1.0 } else { 0.0 }, &b, 200);
        assert_relative_eq!(v, 1.0, max_relative = 1e-2);
    }

    #[test]
    fn simpson_gaussian_integral() {
        // ∫_{-8}^{8} e^{-x^2/2} dx = sqrt(2π) up to 1e-12
        let v = simpson(&mut |x| (-x * x / 2.0).exp(), -8.0, 8.0, 256);
        assert_relative_eq!(v, (2.0 * PI).sqrt(), max_relative = 1e-10);
    }

    #[test]
    fn ball_stencil_volume_converges() {
        let s = BallStencil::new(3, 1.0, 24);
        assert_relative_eq!(s.total_weight(), ball_volume(3, 1.0), max_relative = 0.02);
        let fine = BallStencil::new(3, 1.0, 48);
        assert_relative_eq!(fine.total_weight(), ball_volume(3, 1.0), max_relative = 0.005);
    }

    #[test]
    fn ball_stencil_integrates_smooth_field() {
        // ∫_{|y|<=1} |y|^2 dy in d=3 = 4π/5
        let s = BallStencil::new(3, 1.0, 40);
        let v = s.integrate(&[0.0, 0.0, 0.0], &mut |y| y.iter().map(|t| t * t).sum());
        assert_relative_eq!(v, 4.0 * PI / 5.0, max_relative = 0.01);
    }

    #[test]
    fn gauss_legendre_matches_the_closed_form_nodes() {
        let (n2, w2) = gauss_legendre(2);
        assert_relative_eq!(n2[0], -1.0 / 3.0f64.sqrt(), max_relative = 1e-14);
        assert_relative_eq!(n2[1], 1.0 / 3.0f64.sqrt(), max_relative = 1e-14);
        assert_relative_eq!(w2[0], 1.0, max_relative = 1e-14);

        let (n3, w3) = gauss_legendre(3);
        assert_eq!(n3[1], 0.0);
        assert_relative_eq!(n3[2], (3.0f64 / 5.0).sqrt(), max_relative = 1e-14);
        assert_relative_eq!(w3[1], 8.0 / 9.0, max_relative = 1e-14);
        assert_relative_eq!(w3[0], 5.0 / 9.0, max_relative = 1e-14);
    }

    #[test]
    fn gauss_legendre_is_exact_through_degree_2n_minus_1() {
        let (nodes, weights) = gauss_legendre(4);
        // ∫_{-1}^{1} x^6 dx = 2/7 (degree 6 <= 2*4-1)
        let v: f64 = nodes
            .iter()
            .zip(&weights)
            .map(|(x, w)| w * x.powi(6))
            .sum();
        assert_relative_eq!(v, 2.0 / 7.0, max_relative = 1e-13);
    }

    #[test]
    fn ball_rule_volume_and_second_moment_are_exact() {
        for d in [3usize, 5] {
            let rule = BallRule::new(d, 1.0, 4);
            let vol = rule.integrate(&vec![0.0; d], &mut |_| 1.0);
            assert_relative_eq!(vol, ball_volume(d, 1.0), max_relative = 1e-12);
            let m2 = rule.integrate(&vec![0.0; d], &mut |y| y.iter().map(|t| t * t).sum());
            let exact = ball_volume(d, 1.0) * d as f64 / (d + 2) as f64;
            assert_relative_eq!(m2, exact, max_relative = 1e-12);
        }
        // scaled radius: volume picks up R^d
        let rule = BallRule::new(3, 0.25, 3);
        assert_relative_eq!(
            rule.integrate(&[0.0; 3], &mut |_| 1.0),
            ball_volume(3, 0.25),
            max_relative = 1e-12
        );
    }

    #[test]
    fn ball_rule_is_exact_on_a_mixed_quartic() {
        // ∫_{|y|<=1} y_0^2 y_1^2 dy in d=3 = 4π ∫_0^1 r^6 dr * 1/15 = 4π/105
        let rule = BallRule::new(3, 1.0, 4);
        let v = rule.integrate(&[0.0; 3], &mut |y| y[0] * y[0] * y[1] * y[1]);
        assert_relative_eq!(v, 4.0 * PI / 105.0, max_relative = 1e-12);
    }

    #[test]
    fn ball_rule_handles_smooth_non_polynomials() {
        // Radial integrand: the angular average is exact, so the only error is
        // the Gauss–Legendre radial error, which is tiny for a Gaussian.
        let reference = simpson(
            &mut |r| 4.0 * PI * r * r * (-r * r / 2.0).exp(),
            0.0,
            1.0,
            512,
        );
        let rule = BallRule::new(3, 1.0, 8);
        let v = rule.integrate(&[0.0; 3], &mut |y| {
            (-y.iter().map(|t| t * t).sum::<f64>() / 2.0).exp()
        });
        assert_relative_eq!(v, reference, max_relative = 1e-9);
        // Off-centre evaluation against the midpoint stencil.
        let s = BallStencil::new(3, 1.0, 60);
        let mut f = |y: &[f64]| (-dist_sq(y, &[0.3, -0.2, 0.1]) / 2.0).exp();
        let coarse = s.integrate(&[1.0, 0.5, -0.25], &mut f);
        let sharp = rule.integrate(&[1.0, 0.5, -0.25], &mut f);
        assert_relative_eq!(sharp, coarse, max_relative = 2e-3);
    }
}
