//! Heavy-tailed random medium: sampler, smoothed field queries, validation
//! estimators, and a versioned on-disk format.
//!
//! The medium is a Poisson point field of atoms `(z_j, ε_j)` with intensity
//! `dz × c_γ ε^{-1-γ} dε` on `window ⊕ pad`, `c_γ = γ / Γ(1-γ)`, truncated at
//! `ε >= eps_min`. With that normalisation the field's log-Laplace functional
//! is `-log E exp(-⟨Γ, φ⟩) = ∫ φ^γ dz` in the `eps_min → 0` limit, which is
//! what the validation battery checks.
//!
//! Atoms are generated in decreasing weight order through unit-rate Poisson
//! arrivals (`ε_i = (vol·c_γ / (γ T_i))^{1/γ}`). Two consequences the tests
//! rely on: the atom count above `eps_min` is exactly Poisson with mean
//! `vol·c_γ·eps_min^{-γ}/γ`, and lowering `eps_min` with the same seed only
//! appends smaller atoms — the retained prefix is bit-identical.

use crate::error::{Error, Result};
use crate::estimator::EstimatorResult;
use crate::geom::{dist_sq, torus_dist_sq, AxisBox, MAX_DIM};
use crate::grid::TorusGrid;
use crate::rng::stream_rng;
use crate::testfn::TestFunction;
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma as gamma_fn;
use std::io::{Read as IoRead, Write as IoWrite};
use std::path::Path;
use std::sync::Arc;

/// Refuse to draw samples whose expected atom count exceeds this.
const MAX_EXPECTED_ATOMS: f64 = 5.0e7;

/// Intensity normalisation `c_γ = γ / Γ(1-γ)`.
pub fn c_gamma(gamma: f64) -> f64 {
    assert!((0.0..1.0).contains(&gamma) && gamma > 0.0, "gamma must be in (0,1)");
    gamma / gamma_fn(1.0 - gamma)
}

/// Mean number of atoms with weight `>= eps_min` in a region of volume `vol`:
/// `vol · c_γ · eps_min^{-γ} / γ`.
pub fn expected_atom_count(gamma: f64, eps_min: f64, vol: f64) -> f64 {
    assert!(eps_min > 0.0 && vol >= 0.0);
    vol * c_gamma(gamma) * eps_min.powf(-gamma) / gamma
}

/// Upper bound on the expected field mass lost to truncation over a region of
/// volume `vol`: `c_γ · vol · eps_min^{1-γ} / (1-γ)`.
pub fn truncation_bias_bound(gamma: f64, eps_min: f64, vol: f64) -> f64 {
    assert!(eps_min > 0.0 && vol >= 0.0);
    c_gamma(gamma) * vol * eps_min.powf(1.0 - gamma) / (1.0 - gamma)
}

/// Sampling parameters for one medium draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub gamma: f64,
    pub eps_min: f64,
    /// Query window in catalyst coordinates.
    pub window: AxisBox,
    /// Sampling margin so unit balls centred in the window see unbiased atom
    /// counts; atoms land in `window ⊕ pad`.
    pub pad: f64,
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::invalid(format!("gamma {} outside (0,1)", self.gamma)));
        }
        if !(self.eps_min > 0.0) {
            return Err(Error::invalid("eps_min must be positive"));
        }
        if !(self.pad >= 0.0) {
            return Err(Error::invalid("pad must be nonnegative"));
        }
        let exp = expected_atom_count(
            self.gamma,
            self.eps_min,
            self.window.expanded(self.pad).volume(),
        );
        if exp > MAX_EXPECTED_ATOMS {
            return Err(Error::ResourceLimit(format!(
                "expected atom count {exp:.3e} exceeds cap {MAX_EXPECTED_ATOMS:.1e}; raise eps_min or shrink the window"
            )));
        }
        Ok(())
    }
}

/// One realisation of the truncated medium. Atom positions are stored flat
/// (`d` coordinates per atom) with weights in decreasing order.
#[derive(Debug, Clone, PartialEq)]
pub struct StableMediumSample {
    pub config: SampleConfig,
    pub seed: u64,
    pub positions: Vec<f64>,
    pub weights: Vec<f64>,
}

impl StableMediumSample {
    pub fn dim(&self) -> usize {
        self.config.window.dim()
    }

    pub fn atom_count(&self) -> usize {
        self.weights.len()
    }

    pub fn position(&self, j: usize) -> &[f64] {
        let d = self.dim();
        &self.positions[j * d..(j + 1) * d]
    }

    /// Build a sample from explicit atoms (hand-built media for oracles and
    /// regression fixtures).
    pub fn from_atoms(
        config: SampleConfig,
        positions: Vec<f64>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.window.dim();
        if positions.len() != weights.len() * d {
            return Err(Error::invalid("positions/weights length mismatch"));
        }
        Ok(StableMediumSample { config, seed: 0, positions, weights })
    }

    /// `⟨Γ, φ⟩ = Σ_j ε_j φ(z_j)` over all sampled atoms.
    pub fn pair_with(&self, phi: &TestFunction) -> f64 {
        let d = self.dim();
        debug_assert_eq!(phi.dim(), d);
        let mut acc = 0.0;
        for j in 0..self.atom_count() {
            let w = self.weights[j];
            let v = phi.eval(self.position(j));
            if v != 0.0 {
                acc += w * v;
            }
        }
        acc
    }
}

/// Draw one medium realisation.
pub fn sample_stable_measure(config: &SampleConfig, seed: u64) -> Result<StableMediumSample> {
    config.validate()?;
    let domain = config.window.expanded(config.pad);
    let d = domain.dim();
    let vol = domain.volume();
    let mut positions = Vec::new();
    let mut weights = Vec::new();
    if vol > 0.0 {
        let mut rng = stream_rng(seed, 0);
        let scale = vol * c_gamma(config.gamma) / config.gamma;
        let inv_gamma = 1.0 / config.gamma;
        let mut t = 0.0_f64;
        loop {
            let e: f64 = Exp1.sample(&mut rng);
            t += e;
            let eps = (scale / t).powf(inv_gamma);
            if eps < config.eps_min {
                break;
            }
            for a in 0..d {
                let u: f64 = rng.random();
                positions.push(domain.lo[a] + u * (domain.hi[a] - domain.lo[a]));
            }
            weights.push(eps);
        }
    }
    Ok(StableMediumSample {
        config: config.clone(),
        seed,
        positions,
        weights,
    })
}

// ---------------------------------------------------------------------------
// field queries
// ---------------------------------------------------------------------------

/// How query geometry treats the window boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Boundary {
    /// Queries restricted to the unpadded window; atoms live on `window ⊕ pad`.
    Padded,
    /// The window is a fundamental domain `[0, P)^d`; distances wrap
    /// (minimum image). Used for torus solves and particle runs.
    Periodic,
}

/// Uniform bucket grid over the atom domain, bucket side >= 1 in catalyst
/// coordinates so a unit-ball query touches at most 3 buckets per axis.
struct BucketIndex {
    lo: Vec<f64>,
    counts: Vec<usize>,
    sides: Vec<f64>,
    buckets: Vec<Vec<u32>>,
}

impl BucketIndex {
    fn build(sample: &StableMediumSample, domain: &AxisBox) -> Self {
        let d = domain.dim();
        let mut counts = Vec::with_capacity(d);
        let mut sides = Vec::with_capacity(d);
        for a in 0..d {
            let span = domain.side(a).max(1e-12);
            let m = (span.floor() as usize).max(1);
            counts.push(m);
            sides.push(span / m as f64);
        }
        let total: usize = counts.iter().product();
        let mut buckets = vec![Vec::new(); total];
        for j in 0..sample.atom_count() {
            let z = sample.position(j);
            let mut flat = 0usize;
            for a in 0..d {
                let i = (((z[a] - domain.lo[a]) / sides[a]).floor() as isize)
                    .clamp(0, counts[a] as isize - 1) as usize;
                flat = flat * counts[a] + i;
            }
            buckets[flat].push(j as u32);
        }
        BucketIndex { lo: domain.lo.clone(), counts, sides, buckets }
    }

    /// Visit each atom index in the 3^d bucket neighbourhood of `z` exactly
    /// once (duplicate buckets from wrapping/clamping are deduplicated).
    fn for_neighbourhood(&self, z: &[f64], periodic: bool, visit: &mut dyn FnMut(u32)) {
        let d = self.lo.len();
        let mut center = [0isize; MAX_DIM];
        for a in 0..d {
            center[a] = (((z[a] - self.lo[a]) / self.sides[a]).floor() as isize)
                .clamp(0, self.counts[a] as isize - 1);
        }
        let mut seen: Vec<usize> = Vec::with_capacity(3usize.pow(d as u32));
        let mut offs = [-1isize; MAX_DIM];
        'outer: loop {
            let mut flat = 0usize;
            for a in 0..d {
                let m = self.counts[a] as isize;
                let mut i = center[a] + offs[a];
                if periodic {
                    i = i.rem_euclid(m);
                } else if i < 0 || i >= m {
                    // advance odometer
                    flat = usize::MAX;
                    break;
                }
                if flat != usize::MAX {
                    flat = flat * self.counts[a] + i as usize;
                }
            }
            if flat != usize::MAX && !seen.contains(&flat) {
                seen.push(flat);
                for &j in &self.buckets[flat] {
                    visit(j);
                }
            }
            // odometer over {-1,0,1}^d
            for a in 0..d {
                offs[a] += 1;
                if offs[a] <= 1 {
                    continue 'outer;
                }
                offs[a] = -1;
            }
            break;
        }
    }
}

/// Smoothed medium field at scale `k`: `x ↦ Σ_j ε_j 1{|k x - z_j| <= 1}`.
pub struct MediumField {
    pub sample: Arc<StableMediumSample>,
    pub k: f64,
    pub boundary: Boundary,
    index: BucketIndex,
    raster: Option<MediumRaster>,
}

/// Cached raster of the field on a torus grid (values at cell centres).
#[derive(Debug, Clone)]
pub struct MediumRaster {
    pub grid: TorusGrid,
    pub values: Vec<f64>,
}

impl MediumField {
    pub fn new(sample: Arc<StableMediumSample>, k: f64, boundary: Boundary) -> Result<Self> {
        if !(k > 0.0) {
            return Err(Error::invalid("scale k must be positive"));
        }
        if boundary == Boundary::Periodic {
            if sample.config.pad != 0.0 {
                return Err(Error::invalid("periodic medium must be sampled with pad = 0"));
            }
            let w = &sample.config.window;
            let p0 = w.side(0);
            for a in 0..w.dim() {
                if w.lo[a] != 0.0 || (w.side(a) - p0).abs() > 1e-12 {
                    return Err(Error::invalid(
                        "periodic medium needs window [0, P]^d with equal sides",
                    ));
                }
            }
        }
        let domain = sample.config.window.expanded(sample.config.pad);
        let index = BucketIndex::build(&sample, &domain);
        Ok(MediumField { sample, k, boundary, index, raster: None })
    }

    fn period(&self) -> f64 {
        self.sample.config.window.side(0)
    }

    /// Field value at `x` in reactant coordinates: sum of weights of atoms
    /// within closed distance 1 of `k x`. In `Padded` mode `k x` must lie in
    /// the window; in `Periodic` mode the point wraps.
    pub fn field_at(&self, x: &[f64]) -> Result<f64> {
        let d = self.sample.dim();
        if x.len() != d {
            return Err(Error::invalid("query dimension mismatch"));
        }
        let mut z: Vec<f64> = x.iter().map(|&xi| xi * self.k).collect();
        match self.boundary {
            Boundary::Padded => {
                if !self.sample.config.window.contains(&z) {
                    return Err(Error::OutOfWindow {
                        point: x.to_vec(),
                        scaled: z,
                        window: self.sample.config.window.to_string(),
                    });
                }
            }
            Boundary::Periodic => {
                let p = self.period();
                for zi in z.iter_mut() {
                    *zi = zi.rem_euclid(p);
                }
            }
        }
        Ok(self.sum_at_scaled(&z))
    }

    fn sum_at_scaled(&self, z: &[f64]) -> f64 {
        let sample = &self.sample;
        let periodic = self.boundary == Boundary::Periodic;
        let p = self.period();
        // Collect then sum in atom order: bucket visit order must not leak
        // into the float result (keeps the query bit-identical to a plain
        // scan over atoms, which the raster path also uses).
        let mut hits: Vec<u32> = Vec::new();
        self.index.for_neighbourhood(z, periodic, &mut |j| {
            let pos = sample.position(j as usize);
            let d2 = if periodic {
                torus_dist_sq(z, pos, p)
            } else {
                dist_sq(z, pos)
            };
            if d2 <= 1.0 {
                hits.push(j);
            }
        });
        hits.sort_unstable();
        hits.iter().map(|&j| sample.weights[j as usize]).sum()
    }

    /// Rasterise the field at the grid's cell centres and cache the result.
    /// For periodic media the grid must tile the window: `k · side = P`.
    pub fn rasterize(&mut self, grid: &TorusGrid) -> Result<&MediumRaster> {
        if let Some(r) = &self.raster {
            if r.grid == *grid {
                // Annoying but borrow-checker-friendly: recompute the borrow.
                return Ok(self.raster.as_ref().unwrap());
            }
        }
        let d = self.sample.dim();
        if grid.d != d {
            return Err(Error::invalid("raster grid dimension mismatch"));
        }
        if self.boundary == Boundary::Periodic {
            let p = self.period();
            if ((grid.side * self.k) - p).abs() > 1e-9 * p.max(1.0) {
                return Err(Error::invalid(format!(
                    "raster grid side {} times k {} must equal medium period {p}",
                    grid.side, self.k
                )));
            }
        }
        let values = self.scatter_raster(grid);
        self.raster = Some(MediumRaster { grid: grid.clone(), values });
        Ok(self.raster.as_ref().unwrap())
    }

    /// Atom-scatter rasterisation: every atom deposits its weight on all cells
    /// whose centre lies within 1/k of `z_j / k`. Equivalent to `field_at` per
    /// cell centre, but O(atoms × stencil) instead of O(cells × density).
    fn scatter_raster(&self, grid: &TorusGrid) -> Vec<f64> {
        let d = grid.d;
        let n = grid.n as isize;
        let h = grid.spacing();
        let r = 1.0 / self.k;
        let r2 = r * r;
        let periodic = self.boundary == Boundary::Periodic;
        let mut values = vec![0.0; grid.len()];
        let reach = (r / h).ceil() as isize + 1;
        let sample = &self.sample;
        let mut lo_idx = [0isize; MAX_DIM];
        let mut hi_idx = [0isize; MAX_DIM];
        let mut idx = [0isize; MAX_DIM];
        for j in 0..sample.atom_count() {
            let z = sample.position(j);
            let w = sample.weights[j];
            for a in 0..d {
                let c = z[a] / self.k; // atom centre in reactant coordinates
                let ci = (c / h - 0.5).round() as isize;
                lo_idx[a] = ci - reach;
                hi_idx[a] = ci + reach;
                if periodic {
                    // deposits use the min-image distance, so each wrapped
                    // cell must be enumerated once; a reach beyond the period
                    // would revisit cells through a second image
                    if hi_idx[a] - lo_idx[a] + 1 > n {
                        hi_idx[a] = lo_idx[a] + n - 1;
                    }
                } else {
                    lo_idx[a] = lo_idx[a].max(0);
                    hi_idx[a] = hi_idx[a].min(n - 1);
                }
                idx[a] = lo_idx[a];
            }
            if (0..d).any(|a| lo_idx[a] > hi_idx[a]) {
                continue;
            }
            'cells: loop {
                // distance from this cell centre to the atom (wrap if periodic)
                let mut d2 = 0.0;
                for a in 0..d {
                    let xc = (idx[a] as f64 + 0.5) * h;
                    let mut delta = xc - z[a] / self.k;
                    if periodic {
                        delta = delta.rem_euclid(grid.side);
                        if delta > grid.side / 2.0 {
                            delta = grid.side - delta;
                        }
                    }
                    d2 += delta * delta;
                    if d2 > r2 {
                        break;
                    }
                }
                if d2 <= r2 {
                    let mut flat = 0usize;
                    for a in 0..d {
                        let i = if periodic {
                            idx[a].rem_euclid(n) as usize
                        } else {
                            idx[a] as usize
                        };
                        flat = flat * grid.n + i;
                    }
                    values[flat] += w;
                }
                for a in (0..d).rev() {
                    idx[a] += 1;
                    if idx[a] <= hi_idx[a] {
                        continue 'cells;
                    }
                    idx[a] = lo_idx[a];
                }
                break;
            }
        }
        values
    }
}

// ---------------------------------------------------------------------------
// validation estimators
// ---------------------------------------------------------------------------

/// Empirical vs analytic sides of the log-Laplace identity for one φ.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogLaplaceCheck {
    /// Mean of `exp(-⟨Γ, φ⟩)` over fresh medium draws.
    pub empirical: EstimatorResult,
    /// `exp(-∫ φ^γ dz)` by quadrature over the window.
    pub analytic: f64,
    /// Truncation bias bound on the *exponent* (`eps_min` mass times ∫φ).
    pub exponent_bias_bound: f64,
}

/// Pair `n_samples` fresh media against each φ in the battery; row `i` of the
/// result is the vector `⟨Γ_s, φ_i⟩` over samples `s`. One medium draw is
/// shared by the whole battery.
pub fn pair_battery(
    config: &SampleConfig,
    phis: &[TestFunction],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    config.validate()?;
    for phi in phis {
        phi.validate()?;
        if phi.dim() != config.window.dim() {
            return Err(Error::invalid("battery dimension mismatch"));
        }
    }
    let rows: Vec<Vec<f64>> = (0..n_samples)
        .into_par_iter()
        .map(|s| {
            let sample = sample_stable_measure(config, crate::rng::derive_seed(seed, s as u64))
                .expect("validated config");
            phis.iter().map(|phi| sample.pair_with(phi)).collect()
        })
        .collect();
    // transpose to per-φ vectors
    let mut out = vec![Vec::with_capacity(n_samples); phis.len()];
    for row in rows {
        for (i, v) in row.into_iter().enumerate() {
            out[i].push(v);
        }
    }
    Ok(out)
}

/// Monte Carlo check of `E exp(-⟨Γ, φ⟩) = exp(-∫ φ^γ)`.
pub fn empirical_loglaplace(
    config: &SampleConfig,
    phi: &TestFunction,
    n_samples: usize,
    quad_nodes: usize,
    seed: u64,
) -> Result<LogLaplaceCheck> {
    let pairings = pair_battery(config, std::slice::from_ref(phi), n_samples, seed)?;
    let vals: Vec<f64> = pairings[0].iter().map(|&v| (-v).exp()).collect();
    let empirical = EstimatorResult::from_samples(&vals, seed);
    let g = config.gamma;
    let integral = crate::quad::midpoint_box(
        &mut |x| phi.eval(x).powf(g),
        &config.window,
        quad_nodes,
    );
    let phi_mass =
        crate::quad::midpoint_box(&mut |x| phi.eval(x), &config.window, quad_nodes);
    Ok(LogLaplaceCheck {
        empirical,
        analytic: (-integral).exp(),
        exponent_bias_bound: truncation_bias_bound(g, config.eps_min, 1.0) * phi_mass,
    })
}

/// Monte Carlo check of the weighted moment identity
/// `E ⟨Γ, φ⟩ e^{-⟨Γ, ψ⟩} = γ ∫ φ ψ^{γ-1} · exp(-∫ ψ^γ)`.
/// ψ must be bounded away from 0 on φ's support or the statistic is
/// heavy-tailed; the quadrature skips points where φ vanishes.
pub fn empirical_weighted_moment(
    config: &SampleConfig,
    phi: &TestFunction,
    psi: &TestFunction,
    n_samples: usize,
    quad_nodes: usize,
    seed: u64,
) -> Result<(EstimatorResult, f64)> {
    let pairings = pair_battery(
        config,
        &[phi.clone(), psi.clone()],
        n_samples,
        seed,
    )?;
    let vals: Vec<f64> = pairings[0]
        .iter()
        .zip(&pairings[1])
        .map(|(&a, &b)| a * (-b).exp())
        .collect();
    let est = EstimatorResult::from_samples(&vals, seed);
    let g = config.gamma;
    let weighted = crate::quad::midpoint_box(
        &mut |x| {
            let p = phi.eval(x);
            if p == 0.0 {
                0.0
            } else {
                p * psi.eval(x).powf(g - 1.0)
            }
        },
        &config.window,
        quad_nodes,
    );
    let psi_pow =
        crate::quad::midpoint_box(&mut |x| psi.eval(x).powf(g), &config.window, quad_nodes);
    Ok((est, g * weighted * (-psi_pow).exp()))
}

// ---------------------------------------------------------------------------
// scaling check
// ---------------------------------------------------------------------------

/// Two-sample Kolmogorov–Smirnov distance and critical value at `level`.
pub fn ks_two_sample(mut a: Vec<f64>, mut b: Vec<f64>, level: f64) -> (f64, f64) {
    assert!(!a.is_empty() && !b.is_empty());
    assert!(level > 0.0 && level < 1.0);
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (n, m) = (a.len(), b.len());
    let mut i = 0;
    let mut j = 0;
    let mut d = 0.0_f64;
    while i < n && j < m {
        let x = a[i].min(b[j]);
        while i < n && a[i] <= x {
            i += 1;
        }
        while j < m && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let c = (-(level / 2.0).ln() / 2.0).sqrt();
    let crit = c * (((n + m) as f64) / ((n * m) as f64)).sqrt();
    (d, crit)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalingCheckReport {
    pub k: f64,
    /// Weight multiplier exponent applied to the reference sample: `d/γ` for
    /// the true scaling, `d` for the negative control.
    pub exponent: f64,
    pub ks_distance: f64,
    pub critical_value: f64,
    pub passes: bool,
}

/// Distributional self-similarity check: `⟨Γ, φ(·/k)⟩` over the k-scaled
/// window against `k^{d/γ} ⟨Γ, φ⟩` over the base window (truncation scaled to
/// make the identity exact in law). Also runs the negative control with the
/// mass-scaling exponent `d`, which must *fail* for γ < 1.
pub fn scaling_check(
    config: &SampleConfig,
    phi: &TestFunction,
    k: f64,
    n_samples: usize,
    level: f64,
    seed: u64,
) -> Result<(ScalingCheckReport, ScalingCheckReport)> {
    if !(k > 0.0) {
        return Err(Error::invalid("k must be positive"));
    }
    let d = config.window.dim() as f64;
    let g = config.gamma;

    let scaled_cfg = SampleConfig {
        window: config.window.scaled(k),
        ..config.clone()
    };
    let base_cfg = SampleConfig {
        eps_min: config.eps_min * k.powf(-d / g),
        ..config.clone()
    };

    let lhs: Vec<f64> = (0..n_samples)
        .into_par_iter()
        .map(|s| {
            let sample =
                sample_stable_measure(&scaled_cfg, crate::rng::derive_seed(seed, s as u64))
                    .expect("validated config");
            let dd = sample.dim();
            let mut acc = 0.0;
            let mut y = vec![0.0; dd];
            for j in 0..sample.atom_count() {
                for a in 0..dd {
                    y[a] = sample.position(j)[a] / k;
                }
                let v = phi.eval(&y);
                if v != 0.0 {
                    acc += sample.weights[j] * v;
                }
            }
            acc
        })
        .collect();
    let rhs_base: Vec<f64> = (0..n_samples)
        .into_par_iter()
        .map(|s| {
            let sample = sample_stable_measure(
                &base_cfg,
                crate::rng::derive_seed(seed ^ 0xa5a5_a5a5_a5a5_a5a5, s as u64),
            )
            .expect("validated config");
            sample.pair_with(phi)
        })
        .collect();

    let make = |exponent: f64| -> ScalingCheckReport {
        let rhs: Vec<f64> = rhs_base.iter().map(|&v| k.powf(exponent) * v).collect();
        let (ks, crit) = ks_two_sample(lhs.clone(), rhs, level);
        ScalingCheckReport {
            k,
            exponent,
            ks_distance: ks,
            critical_value: crit,
            passes: ks <= crit,
        }
    };
    Ok((make(d / g), make(d)))
}

// ---------------------------------------------------------------------------
// on-disk format
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"SLMD";
const FORMAT_VERSION: u32 = 1;

impl StableMediumSample {
    /// Columnar little-endian binary: header (magic, version, d, γ, eps_min,
    /// pad, seed, window bounds, atom count), then all positions, then all
    /// weights.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(MAGIC)?;
        f.write_all(&FORMAT_VERSION.to_le_bytes())?;
        f.write_all(&(self.dim() as u32).to_le_bytes())?;
        f.write_all(&self.config.gamma.to_le_bytes())?;
        f.write_all(&self.config.eps_min.to_le_bytes())?;
        f.write_all(&self.config.pad.to_le_bytes())?;
        f.write_all(&self.seed.to_le_bytes())?;
        for a in 0..self.dim() {
            f.write_all(&self.config.window.lo[a].to_le_bytes())?;
            f.write_all(&self.config.window.hi[a].to_le_bytes())?;
        }
        f.write_all(&(self.atom_count() as u64).to_le_bytes())?;
        for v in &self.positions {
            f.write_all(&v.to_le_bytes())?;
        }
        for v in &self.weights {
            f.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a medium sample file (bad magic)".into()));
        }
        let version = read_u32(&mut f)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported medium format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let d = read_u32(&mut f)? as usize;
        if d == 0 || d > MAX_DIM {
            return Err(Error::Format(format!("corrupt dimension {d}")));
        }
        let gamma = read_f64(&mut f)?;
        let eps_min = read_f64(&mut f)?;
        let pad = read_f64(&mut f)?;
        let seed = read_u64(&mut f)?;
        let mut lo = vec![0.0; d];
        let mut hi = vec![0.0; d];
        for a in 0..d {
            lo[a] = read_f64(&mut f)?;
            hi[a] = read_f64(&mut f)?;
        }
        let window =
            AxisBox::new(lo, hi).map_err(|e| Error::Format(format!("corrupt window: {e}")))?;
        let count = read_u64(&mut f)? as usize;
        let mut positions = vec![0.0; count * d];
        for v in positions.iter_mut() {
            *v = read_f64(&mut f)?;
        }
        let mut weights = vec![0.0; count];
        for v in weights.iter_mut() {
            *v = read_f64(&mut f)?;
        }
        let config = SampleConfig { gamma, eps_min, window, pad };
        config.validate().map_err(|e| Error::Format(format!("corrupt header: {e}")))?;
        Ok(StableMediumSample { config, seed, positions, weights })
    }
}

fn read_u32(f: &mut impl IoRead) -> Result<u32> {
    let mut b = [0u8; 4];
    f.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(f: &mut impl IoRead) -> Result<u64> {
    let mut b = [0u8; 8];
    f.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(f: &mut impl IoRead) -> Result<f64> {
    let mut b = [0u8; 8];
    f.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
