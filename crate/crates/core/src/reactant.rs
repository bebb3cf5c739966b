//! Branching-particle approximation of the measure-valued reactant process:
//! particles of mass `epsilon` move as Brownian motions and undergo critical
//! binary branching (die or split, probability ½ each) at rate
//! `coupling · rho · catalyst(x) / epsilon`.
//!
//! The coupling calibration is the load-bearing number. For offspring
//! generating function `f(s) = ½ + ½s²` and branch rate `q`, the one-particle
//! functional `v = E exp(-⟨subtree, εφ⟩)` solves `∂_t v = ½Δv + (q/2)(1-v)²`,
//! so `w = (1-v)/ε` solves `∂_t w = ½Δw - (qε/2) w²`. Matching the solver's
//! nonlinearity `rho · catalyst · w²` forces `q = 2 · rho · catalyst / ε` —
//! coupling 2, verified against the constant-medium Riccati oracle (and a
//! deliberately miscalibrated run must fail it).
//!
//! Time stepping freezes each particle's branch rate at its position for one
//! step of length `delta` and then simulates the branching *exactly* on that
//! interval (exponential clocks, cascades included), so a spatially constant
//! catalyst incurs no time-discretisation bias at all; a spatially varying
//! one only the `O(delta)` frozen-rate error.

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::brownian::MeasureSpec;
use crate::error::{Error, Result};
use crate::estimator::EstimatorResult;
use crate::geom::AxisBox;
use crate::medium::MediumRaster;
use crate::rng::{derive_seed, stream_rng};
use crate::testfn::TestFunction;

/// Calibrated branching-coupling constant (see module docs).
pub const CALIBRATED_COUPLING: f64 = 2.0;

/// Default hard abort threshold on the population size.
pub const DEFAULT_PARTICLE_CAP: usize = 10_000_000;

/// Fraction of a nominal step below which a trailing remainder is dropped.
const REMAINDER_TOLERANCE: f64 = 1e-9;

// ---------------------------------------------------------------------------
// configuration and catalyst
// ---------------------------------------------------------------------------

/// Particle-system parameters: branching strength `rho`, time step `delta`,
/// particle mass `epsilon`, the branching-coupling constant (leave at the
/// calibrated default except in calibration experiments), and the population
/// cap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReactantConfig {
    pub rho: f64,
    pub delta: f64,
    pub epsilon: f64,
    #[serde(default = "default_coupling")]
    pub coupling: f64,
    #[serde(default = "default_cap")]
    pub particle_cap: usize,
}

fn default_coupling() -> f64 {
    CALIBRATED_COUPLING
}

fn default_cap() -> usize {
    DEFAULT_PARTICLE_CAP
}

impl ReactantConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.rho.is_finite() || self.rho < 0.0 {
            return Err(Error::invalid("rho must be finite and >= 0"));
        }
        if !self.delta.is_finite() || self.delta <= 0.0 {
            return Err(Error::invalid("time step delta must be finite and > 0"));
        }
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 {
            return Err(Error::invalid("particle mass epsilon must be finite and > 0"));
        }
        if !self.coupling.is_finite() || self.coupling <= 0.0 {
            return Err(Error::invalid("branching coupling must be finite and > 0"));
        }
        if self.particle_cap == 0 {
            return Err(Error::invalid("particle cap must be positive"));
        }
        Ok(())
    }
}

/// The catalyst field particles branch against. `Raster` matches what the
/// grid solvers see — piecewise constant on grid cells, periodic wrapping —
/// so the quenched comparison against the nonlinear solver feeds both sides
/// the identical field.
#[derive(Debug, Clone)]
pub enum Catalyst {
    /// Spatially constant field (the scalar-oracle regime).
    Constant(f64),
    /// Rasterized medium on a periodic grid.
    Raster(MediumRaster),
}

impl Catalyst {
    pub fn value_at(&self, x: &[f64]) -> f64 {
        match self {
            Catalyst::Constant(v) => *v,
            Catalyst::Raster(raster) => {
                let grid = &raster.grid;
                let n = grid.n;
                let h = grid.spacing();
                let mut flat = 0usize;
                for a in 0..grid.d {
                    let u = x[a].rem_euclid(grid.side);
                    let mut i = (u / h) as usize;
                    if i >= n {
                        i = n - 1;
                    }
                    flat = flat * n + i;
                }
                raster.values[flat]
            }
        }
    }

    fn validate(&self, d: usize) -> Result<()> {
        match self {
            Catalyst::Constant(v) => {
                if !v.is_finite() || *v < 0.0 {
                    return Err(Error::invalid("constant catalyst must be finite and >= 0"));
                }
            }
            Catalyst::Raster(raster) => {
                if raster.grid.d != d {
                    return Err(Error::invalid(
                        "catalyst raster dimension does not match the initial measure",
                    ));
                }
                if raster.values.len() != raster.grid.len()
                    || raster.values.iter().any(|v| !v.is_finite() || *v < 0.0)
                {
                    return Err(Error::invalid("catalyst raster must be finite and >= 0"));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// particle system
// ---------------------------------------------------------------------------

/// A population snapshot: `particle_count` positions of common mass
/// `epsilon`, flat point-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSystem {
    pub d: usize,
    /// Particle `i` occupies `positions[i*d .. (i+1)*d]`.
    pub positions: Vec<f64>,
    /// Common particle mass.
    pub epsilon: f64,
    /// Process time of this snapshot.
    pub time: f64,
    pub seed: u64,
}

impl ParticleSystem {
    pub fn particle_count(&self) -> usize {
        self.positions.len() / self.d
    }

    /// `epsilon` times the particle count.
    pub fn total_mass(&self) -> f64 {
        self.epsilon * self.particle_count() as f64
    }

    pub fn position(&self, i: usize) -> &[f64] {
        &self.positions[i * self.d..(i + 1) * self.d]
    }

    /// `⟨X, φ⟩ = epsilon · Σ_i φ(x_i)`.
    pub fn pair_with(&self, phi: &TestFunction) -> Result<f64> {
        if phi.dim() != self.d {
            return Err(Error::invalid("test function dimension mismatch"));
        }
        let mut sum = 0.0;
        for i in 0..self.particle_count() {
            sum += phi.eval(self.position(i));
        }
        Ok(self.epsilon * sum)
    }

    /// Particle counts on the regular `cells`-per-axis subdivision of
    /// `support` (row-major, last axis fastest); particles outside are
    /// dropped.
    pub fn count_in_cells(&self, support: &AxisBox, cells: usize) -> Result<Vec<u64>> {
        if support.dim() != self.d {
            return Err(Error::invalid("binning box dimension mismatch"));
        }
        if cells == 0 {
            return Err(Error::invalid("need at least one cell per axis"));
        }
        let total = cells.pow(self.d as u32);
        let mut counts = vec![0u64; total];
        'outer: for i in 0..self.particle_count() {
            let x = self.position(i);
            let mut flat = 0usize;
            for a in 0..self.d {
                let width = support.hi[a] - support.lo[a];
                let u = (x[a] - support.lo[a]) / width;
                if !(0.0..1.0).contains(&u) {
                    continue 'outer;
                }
                flat = flat * cells + (u * cells as f64) as usize;
            }
            counts[flat] += 1;
        }
        Ok(counts)
    }

    /// Snapshot as CSV: header `x0,..,x{d-1},mass`, one row per particle.
    pub fn csv(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::new();
        for a in 0..self.d {
            let _ = write!(out, "x{a},");
        }
        out.push_str("mass\n");
        for i in 0..self.particle_count() {
            for v in self.position(i) {
                let _ = write!(out, "{v},");
            }
            let _ = writeln!(out, "{}", self.epsilon);
        }
        out
    }
}

// ---------------------------------------------------------------------------
// simulation
// ---------------------------------------------------------------------------

/// Runs the branching-particle system to time `t` from a Poissonization of
/// `mu / epsilon`: initial particle positions form a Poisson point process
/// with intensity `mu / epsilon`, every particle then diffuses with step
/// `delta` and branches critically at rate
/// `coupling · rho · catalyst(x) / epsilon`.
pub fn simulate(
    mu: &MeasureSpec,
    t: f64,
    config: &ReactantConfig,
    catalyst: &Catalyst,
    seed: u64,
) -> Result<ParticleSystem> {
    config.validate()?;
    mu.validate()?;
    let d = mu.dim();
    catalyst.validate(d)?;
    if !t.is_finite() || t < 0.0 {
        return Err(Error::invalid("simulation time must be finite and >= 0"));
    }
    let mut rng = stream_rng(seed, 0);
    let mut positions = poissonize(mu, config.epsilon, &mut rng)?;
    if positions.len() / d > config.particle_cap {
        return Err(Error::ResourceLimit(format!(
            "initial population {} exceeds the particle cap {}",
            positions.len() / d,
            config.particle_cap
        )));
    }

    let rate_scale = config.coupling * config.rho / config.epsilon;
    let full_steps = (t / config.delta).floor() as usize;
    let remainder = t - full_steps as f64 * config.delta;
    let mut elapsed = 0.0;
    let mut scratch = Vec::new();
    for step in 0..=full_steps {
        let dt = if step < full_steps {
            config.delta
        } else if remainder > REMAINDER_TOLERANCE * config.delta {
            remainder
        } else {
            break;
        };
        if rate_scale > 0.0 {
            branch_step(&mut positions, &mut scratch, d, rate_scale, dt, catalyst, &mut rng);
            if positions.len() / d > config.particle_cap {
                return Err(Error::ResourceLimit(format!(
                    "population {} exceeded the particle cap {} at time {elapsed}",
                    positions.len() / d,
                    config.particle_cap
                )));
            }
        }
        let std = dt.sqrt();
        for v in positions.iter_mut() {
            let g: f64 = rng.sample(StandardNormal);
            *v += std * g;
        }
        elapsed += dt;
    }
    Ok(ParticleSystem {
        d,
        positions,
        epsilon: config.epsilon,
        time: t,
        seed,
    })
}

/// One branching sweep: each particle's rate is frozen at its current
/// position and its critical binary branching is simulated exactly over the
/// interval `dt` — exponential clocks, with children re-entering the clock
/// race for the remaining time.
fn branch_step(
    positions: &mut Vec<f64>,
    scratch: &mut Vec<f64>,
    d: usize,
    rate_scale: f64,
    dt: f64,
    catalyst: &Catalyst,
    rng: &mut impl Rng,
) {
    scratch.clear();
    let count = positions.len() / d;
    let mut pending: Vec<f64> = Vec::new();
    for i in 0..count {
        let x = &positions[i * d..(i + 1) * d];
        let rate = rate_scale * catalyst.value_at(x);
        if rate <= 0.0 {
            scratch.extend_from_slice(x);
            continue;
        }
        pending.clear();
        pending.push(dt);
        while let Some(remaining) = pending.pop() {
            // -ln(U)/rate: U = 0 gives +inf, i.e. no event — safe.
            let clock = -rng.random::<f64>().ln() / rate;
            if clock >= remaining {
                scratch.extend_from_slice(x);
            } else if rng.random::<f64>() < 0.5 {
                let left = remaining - clock;
                pending.push(left);
                pending.push(left);
            }
            // else: the particle died, nothing survives from this lineage
        }
    }
    std::mem::swap(positions, scratch);
}

/// Draws a Poisson point process with intensity `mu / epsilon`.
fn poissonize(mu: &MeasureSpec, epsilon: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let d = mu.dim();
    let mut positions = Vec::new();
    match mu {
        MeasureSpec::LebesgueBox { support, density } => {
            let n = poisson_count(density * support.volume() / epsilon, rng)?;
            for _ in 0..n {
                for a in 0..d {
                    positions
                        .push(support.lo[a] + rng.random::<f64>() * (support.hi[a] - support.lo[a]));
                }
            }
        }
        MeasureSpec::GridDensity {
            support,
            cells,
            values,
        } => {
            let cell_vol = support.volume() / values.len() as f64;
            let mut idx = vec![0usize; d];
            for (flat, v) in values.iter().enumerate() {
                let n = poisson_count(v * cell_vol / epsilon, rng)?;
                if n == 0 {
                    continue;
                }
                let mut rem = flat;
                for a in (0..d).rev() {
                    idx[a] = rem % cells;
                    rem /= cells;
                }
                for _ in 0..n {
                    for a in 0..d {
                        let w = (support.hi[a] - support.lo[a]) / *cells as f64;
                        let lo = support.lo[a] + idx[a] as f64 * w;
                        positions.push(lo + rng.random::<f64>() * w);
                    }
                }
            }
        }
        MeasureSpec::Atoms {
            positions: atom_pos,
            masses,
            ..
        } => {
            for (j, m) in masses.iter().enumerate() {
                let n = poisson_count(m / epsilon, rng)?;
                for _ in 0..n {
                    positions.extend_from_slice(&atom_pos[j * d..(j + 1) * d]);
                }
            }
        }
    }
    Ok(positions)
}

fn poisson_count(mean: f64, rng: &mut impl Rng) -> Result<usize> {
    if mean < 0.0 || !mean.is_finite() {
        return Err(Error::invalid("Poisson intensity must be finite and >= 0"));
    }
    if mean == 0.0 {
        return Ok(0);
    }
    let dist = Poisson::new(mean)
        .map_err(|e| Error::invalid(format!("bad Poisson intensity {mean}: {e}")))?;
    Ok(dist.sample(rng) as usize)
}

/// Monte Carlo mean of `exp(-⟨X_t, φ⟩)` over independent replicas on
/// counter-derived seed streams; the reduction order is fixed, so the result
/// is bit-identical for any worker count.
pub fn laplace_functional_mc(
    mu: &MeasureSpec,
    phi: &TestFunction,
    t: f64,
    config: &ReactantConfig,
    catalyst: &Catalyst,
    runs: usize,
    seed: u64,
) -> Result<EstimatorResult> {
    if runs < 2 {
        return Err(Error::invalid("need at least 2 replicas for a standard error"));
    }
    if phi.dim() != mu.dim() {
        return Err(Error::invalid("test function dimension mismatch"));
    }
    let started = std::time::Instant::now();
    let samples: Vec<f64> = (0..runs)
        .into_par_iter()
        .map(|r| {
            let system = simulate(mu, t, config, catalyst, derive_seed(seed, r as u64))?;
            Ok((-system.pair_with(phi)?).exp())
        })
        .collect::<Result<_>>()?;
    let mut estimate = EstimatorResult::from_samples(&samples, seed);
    estimate.wall_time_secs = started.elapsed().as_secs_f64();
    Ok(estimate)
}

// ---------------------------------------------------------------------------
// hydrodynamic rescaling
// ---------------------------------------------------------------------------

/// Applies the mass–time–space rescaling to a snapshot: positions divided by
/// `k`, masses multiplied by `k^{-d}`, and the time stamp reinterpreted from
/// `k² t` to `t`.
pub fn rescale(system: &ParticleSystem, k: f64) -> Result<ParticleSystem> {
    if !k.is_finite() || k <= 0.0 {
        return Err(Error::invalid("rescaling factor must be finite and > 0"));
    }
    Ok(ParticleSystem {
        d: system.d,
        positions: system.positions.iter().map(|x| x / k).collect(),
        epsilon: system.epsilon * k.powi(-(system.d as i32)),
        time: system.time / (k * k),
        seed: system.seed,
    })
}

/// The same rescaling on a measure: `mu^k(B) = k^{-d} mu(kB)`. Supports
/// shrink by `k`; a Lebesgue density is invariant (mass `k^{-d}`, volume
/// `k^{-d}`), atom masses pick up `k^{-d}`.
pub fn rescale_measure(mu: &MeasureSpec, k: f64) -> Result<MeasureSpec> {
    if !k.is_finite() || k <= 0.0 {
        return Err(Error::invalid("rescaling factor must be finite and > 0"));
    }
    let d = mu.dim();
    let scale_box = |b: &AxisBox| -> Result<AxisBox> {
        AxisBox::new(
            b.lo.iter().map(|v| v / k).collect(),
            b.hi.iter().map(|v| v / k).collect(),
        )
    };
    Ok(match mu {
        MeasureSpec::LebesgueBox { support, density } => MeasureSpec::LebesgueBox {
            support: scale_box(support)?,
            density: *density,
        },
        MeasureSpec::GridDensity {
            support,
            cells,
            values,
        } => MeasureSpec::GridDensity {
            support: scale_box(support)?,
            cells: *cells,
            values: values.clone(),
        },
        MeasureSpec::Atoms {
            d: dim,
            positions,
            masses,
        } => MeasureSpec::Atoms {
            d: *dim,
            positions: positions.iter().map(|x| x / k).collect(),
            masses: masses
                .iter()
                .map(|m| m * k.powi(-(d as i32)))
                .collect(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TorusGrid;
    use crate::medium::{sample_stable_measure, Boundary, MediumField, SampleConfig};
    use crate::pde::{pair_with_measure, solve_scaled_loglaplace, ScalingConfig};
    use approx::assert_relative_eq;
    use statrs::function::erf::erf;
    use std::sync::Arc;

    fn uniform_box(d: usize, lo: f64, hi: f64, density: f64) -> MeasureSpec {
        MeasureSpec::LebesgueBox {
            support: AxisBox::new(vec![lo; d], vec![hi; d]).unwrap(),
            density,
        }
    }

    fn base_config() -> ReactantConfig {
        ReactantConfig {
            rho: 0.0,
            delta: 0.01,
            epsilon: 0.01,
            coupling: CALIBRATED_COUPLING,
            particle_cap: DEFAULT_PARTICLE_CAP,
        }
    }

    #[test]
    fn initial_population_poissonizes_the_measure() {
        let mu = uniform_box(3, 0.0, 2.0, 1.0); // mass 8
        let config = base_config();
        let system = simulate(&mu, 0.0, &config, &Catalyst::Constant(0.0), 42).unwrap();
        let expected = mu.total_mass() / config.epsilon; // 800
        let z = (system.particle_count() as f64 - expected) / expected.sqrt();
        assert!(z.abs() < 5.0, "initial count z-score {z}");
        assert_relative_eq!(
            system.total_mass(),
            config.epsilon * system.particle_count() as f64
        );
        assert_eq!(system.time, 0.0);
    }

    #[test]
    fn zero_coupling_preserves_the_population_exactly() {
        let mu = uniform_box(3, 0.0, 1.0, 2.0);
        let config = base_config();
        let start = simulate(&mu, 0.0, &config, &Catalyst::Constant(5.0), 7).unwrap();
        let end = simulate(&mu, 0.5, &config, &Catalyst::Constant(5.0), 7).unwrap();
        // rho = 0 silences branching no matter the catalyst
        assert_eq!(start.particle_count(), end.particle_count());
    }

    /// Without branching, the time-t population is a Poisson point process
    /// with intensity `(S_t mu) / epsilon`; cell counts must match the
    /// erf-product closed form of the heat flow of a uniform box.
    #[test]
    fn free_population_follows_the_heat_flow() {
        let rho0 = 2.0;
        let mu = uniform_box(3, 0.0, 2.0, rho0);
        let config = base_config();
        let t = 0.3;
        let system = simulate(&mu, t, &config, &Catalyst::Constant(0.0), 99).unwrap();
        let window = AxisBox::new(vec![-1.0; 3], vec![3.0; 3]).unwrap();
        let cells = 8;
        let counts = system.count_in_cells(&window, cells).unwrap();
        let h = 4.0 / cells as f64;
        let s = (2.0 * t).sqrt();
        let axis_profile = |x: f64| 0.5 * (erf((2.0 - x) / s) - erf((0.0 - x) / s));
        let mut checked = 0;
        let mut worst = 0.0f64;
        let mut mean_abs = 0.0;
        for (flat, &c) in counts.iter().enumerate() {
            let (i, j, l) = (flat / (cells * cells), (flat / cells) % cells, flat % cells);
            let centre = |idx: usize| -1.0 + (idx as f64 + 0.5) * h;
            let density =
                rho0 * axis_profile(centre(i)) * axis_profile(centre(j)) * axis_profile(centre(l));
            let lambda = density * h.powi(3) / config.epsilon;
            if lambda < 10.0 {
                continue;
            }
            let z = (c as f64 - lambda) / lambda.sqrt();
            worst = worst.max(z.abs());
            mean_abs += z.abs();
            checked += 1;
        }
        assert!(checked >= 20, "only {checked} cells had enough mass");
        mean_abs /= checked as f64;
        assert!(worst < 4.0, "worst cell z-score {worst} over {checked} cells");
        assert!(mean_abs < 1.5, "mean |z| {mean_abs}");
    }

    #[test]
    fn zero_test_function_gives_unit_laplace_functional() {
        let mu = uniform_box(3, 0.0, 1.0, 1.0);
        let mut config = base_config();
        config.rho = 0.5;
        let phi = TestFunction::ConstantOnTorus { d: 3, theta: 0.0 };
        let est =
            laplace_functional_mc(&mu, &phi, 0.2, &config, &Catalyst::Constant(1.0), 16, 3).unwrap();
        assert_eq!(est.value, 1.0);
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn critical_branching_keeps_the_mean_mass() {
        let mu = uniform_box(3, 0.0, 1.0, 2.0); // mass 2
        let config = ReactantConfig {
            rho: 1.0,
            delta: 0.001,
            epsilon: 0.02,
            coupling: CALIBRATED_COUPLING,
            particle_cap: DEFAULT_PARTICLE_CAP,
        };
        let masses: Vec<f64> = (0..400u64)
            .into_par_iter()
            .map(|r| {
                simulate(&mu, 0.5, &config, &Catalyst::Constant(1.0), 1000 + r)
                    .map(|s| s.total_mass())
            })
            .collect::<Result<_>>()
            .unwrap();
        let est = EstimatorResult::from_samples(&masses, 1000);
        let z = est.z_score(mu.total_mass());
        assert!(z < 3.0, "mean mass {} vs initial {} (z = {z})", est.value, 2.0);
    }

    /// The coupling oracle. With a constant catalyst and constant test
    /// function the solver side is the exact scalar Riccati solution, so
    /// `E exp(-⟨X_t, φ⟩)` must hit `exp(-⟨mu, u(t)⟩)` within noise — and a
    /// deliberately miscalibrated coupling must visibly miss it.
    #[test]
    fn homogeneous_medium_matches_the_riccati_oracle() {
        let mu = uniform_box(3, 0.0, 1.0, 2.0); // mass 2
        let (theta, rho, rho_bar, t) = (0.5, 1.0, 1.0, 0.5);
        let phi = TestFunction::ConstantOnTorus { d: 3, theta };
        let config = ReactantConfig {
            rho,
            delta: 0.001,
            epsilon: 0.02,
            coupling: CALIBRATED_COUPLING,
            particle_cap: DEFAULT_PARTICLE_CAP,
        };
        let u = theta / (1.0 + rho * rho_bar * theta * t);
        let target = (-mu.total_mass() * u).exp();
        let est = laplace_functional_mc(
            &mu,
            &phi,
            t,
            &config,
            &Catalyst::Constant(rho_bar),
            1000,
            2026,
        )
        .unwrap();
        let z = est.z_score(target);
        assert!(z < 3.0, "calibrated run: {} vs {target} (z = {z})", est.value);

        // negative control: doubling the coupling doubles the effective
        // nonlinearity, which the same oracle must reject
        let mut wrong = config.clone();
        wrong.coupling = 2.0 * CALIBRATED_COUPLING;
        let bad = laplace_functional_mc(
            &mu,
            &phi,
            t,
            &wrong,
            &Catalyst::Constant(rho_bar),
            1000,
            2027,
        )
        .unwrap();
        let z_bad = bad.z_score(target);
        assert!(
            z_bad > 4.0,
            "miscalibrated run was not rejected: {} vs {target} (z = {z_bad})",
            bad.value
        );
    }

    /// With a constant catalyst the within-step branching is exact, so the
    /// law does not depend on the step at all; halving it must leave two
    /// independent estimates within ordinary Monte Carlo noise. Any hidden
    /// step dependence (a rate scaled by the wrong power of delta, say)
    /// shifts the mean far outside this band.
    #[test]
    fn step_halving_is_statistically_silent() {
        let mu = uniform_box(3, 0.0, 1.0, 2.0);
        let phi = TestFunction::ConstantOnTorus { d: 3, theta: 0.5 };
        let mut coarse_cfg = ReactantConfig {
            rho: 1.0,
            delta: 0.002,
            epsilon: 0.02,
            coupling: CALIBRATED_COUPLING,
            particle_cap: DEFAULT_PARTICLE_CAP,
        };
        let cat = Catalyst::Constant(1.0);
        let coarse = laplace_functional_mc(&mu, &phi, 0.5, &coarse_cfg, &cat, 600, 5).unwrap();
        coarse_cfg.delta = 0.001;
        let fine = laplace_functional_mc(&mu, &phi, 0.5, &coarse_cfg, &cat, 600, 5).unwrap();
        let se = (coarse.std_error.powi(2) + fine.std_error.powi(2)).sqrt();
        assert!(
            (coarse.value - fine.value).abs() < 3.0 * se,
            "step halving moved the estimate by {} vs combined SE {se}",
            (coarse.value - fine.value).abs()
        );
    }

    /// End-to-end quenched consistency: on a fixed sampled stable medium the
    /// empirical Laplace functional must match the nonlinear grid solver fed
    /// the identical rasterized catalyst.
    #[test]
    fn quenched_laplace_functional_matches_the_grid_solver() {
        let side = 2.0;
        let (theta, rho, t) = (0.2, 0.15, 0.3);
        let grid = TorusGrid::new(3, 8, side).unwrap();
        let phi = TestFunction::ConstantOnTorus { d: 3, theta };
        let mu = uniform_box(3, 0.0, side, 0.25); // mass 2
        let config = ReactantConfig {
            rho,
            delta: 0.001,
            epsilon: 0.015,
            coupling: CALIBRATED_COUPLING,
            particle_cap: DEFAULT_PARTICLE_CAP,
        };
        for medium_seed in [11u64, 12, 13] {
            let window = AxisBox::new(vec![0.0; 3], vec![side; 3]).unwrap();
            let sample = sample_stable_measure(
                &SampleConfig {
                    gamma: 0.8,
                    eps_min: 1e-3,
                    window,
                    pad: 0.0,
                },
                medium_seed,
            )
            .unwrap();
            let mut field =
                MediumField::new(Arc::new(sample), 1.0, Boundary::Periodic).unwrap();
            let raster = field.rasterize(&grid).unwrap().clone();

            let solver_config = ScalingConfig {
                d: 3,
                gamma: 0.8,
                rho,
                k: 1.0,
                kappa: 0.0,
                t,
                time_steps: 64,
                snapshots: 1,
                side,
                resolution: 8,
            };
            let u = solve_scaled_loglaplace(&solver_config, &raster, &phi).unwrap();
            let paired = pair_with_measure(&grid, u.final_snapshot(), &mu, 16).unwrap();
            let target = (-paired).exp();

            let est = laplace_functional_mc(
                &mu,
                &phi,
                t,
                &config,
                &Catalyst::Raster(raster),
                400,
                medium_seed * 1000,
            )
            .unwrap();
            let z = est.z_score(target);
            assert!(
                z < 3.0,
                "medium seed {medium_seed}: empirical {} vs solver {target} (z = {z})",
                est.value
            );
        }
    }

    #[test]
    fn population_cap_aborts_oversized_runs() {
        let mu = uniform_box(3, 0.0, 1.0, 50.0);
        let mut config = base_config();
        config.particle_cap = 10;
        let err = simulate(&mu, 0.1, &config, &Catalyst::Constant(0.0), 1).unwrap_err();
        assert!(matches!(err, Error::ResourceLimit(_)));
    }

    #[test]
    fn rescaling_is_exact_and_composes() {
        let mu = uniform_box(3, 0.0, 1.0, 3.0);
        let mut config = base_config();
        config.rho = 0.4;
        let system = simulate(&mu, 0.4, &config, &Catalyst::Constant(1.0), 21).unwrap();

        let identity = rescale(&system, 1.0).unwrap();
        assert_eq!(system, identity);

        let k = 2.0;
        let scaled = rescale(&system, k).unwrap();
        assert_relative_eq!(
            scaled.total_mass(),
            system.total_mass() * k.powi(-3),
            max_relative = 1e-15
        );
        assert_relative_eq!(scaled.time, system.time / (k * k));

        // powers of two divide exactly in binary, so composition is bitwise
        let once = rescale(&rescale(&system, 2.0).unwrap(), 4.0).unwrap();
        let direct = rescale(&system, 8.0).unwrap();
        assert_eq!(once, direct);
    }

    #[test]
    fn measure_rescaling_matches_the_definition() {
        let atom = MeasureSpec::Atoms {
            d: 3,
            positions: vec![1.5, -0.5, 2.0],
            masses: vec![1.0],
        };
        let scaled = rescale_measure(&atom, 2.0).unwrap();
        match &scaled {
            MeasureSpec::Atoms {
                positions, masses, ..
            } => {
                assert_eq!(positions.as_slice(), &[0.75, -0.25, 1.0]);
                assert_relative_eq!(masses[0], 0.125);
            }
            _ => panic!("variant changed under rescaling"),
        }
        let boxy = uniform_box(3, 0.0, 2.0, 1.5);
        let sboxy = rescale_measure(&boxy, 2.0).unwrap();
        assert_relative_eq!(
            sboxy.total_mass(),
            boxy.total_mass() / 8.0,
            max_relative = 1e-15
        );
        assert_eq!(rescale_measure(&boxy, 1.0).unwrap(), boxy);
    }

    #[test]
    fn runs_are_seed_deterministic() {
        let mu = uniform_box(3, 0.0, 1.0, 2.0);
        let mut config = base_config();
        config.rho = 0.8;
        let cat = Catalyst::Constant(1.2);
        let a = simulate(&mu, 0.3, &config, &cat, 5150).unwrap();
        let b = simulate(&mu, 0.3, &config, &cat, 5150).unwrap();
        assert_eq!(a, b);
        let c = simulate(&mu, 0.3, &config, &cat, 5151).unwrap();
        assert_ne!(a.positions, c.positions);
    }

    #[test]
    fn snapshot_csv_has_one_row_per_particle() {
        let mu = MeasureSpec::Atoms {
            d: 3,
            positions: vec![0.5, 0.5, 0.5],
            masses: vec![0.05],
        };
        let config = base_config();
        let system = simulate(&mu, 0.0, &config, &Catalyst::Constant(0.0), 8).unwrap();
        let csv = system.csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "x0,x1,x2,mass");
        assert_eq!(csv.lines().count(), 1 + system.particle_count());
        if system.particle_count() > 0 {
            let row = lines.next().unwrap();
            assert!(row.ends_with("0.01"));
            assert!(row.starts_with("0.5,0.5,0.5,"));
        }
    }
}
