//! Heat-kernel and Brownian-path machinery: closed-form kernel evaluation,
//! the spectral heat semigroup on a periodic box, adaptive path simulation
//! with small-ball hitting corrections, occupation-time moment estimators,
//! and the pair-interaction energy used to classify initial measures.
//!
//! Everything stochastic here is deterministic given its seed: paths draw
//! from counter-derived per-path streams and results reduce in fixed order,
//! so reruns are bit-identical regardless of worker count.
//!
//! The one approximation that deserves attention is the per-step
//! Brownian-bridge hitting correction (see [`hitting_prob`]): crude discrete
//! stepping misses excursions between sample points, and unbiased small-ball
//! hitting is the dominant error source in every estimator built on top of
//! this module. The correction's residual bias shrinks with the near-target
//! step; halve `delta` until estimates move by less than a standard error
//! when calibrating a new regime.

use std::f64::consts::PI;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::EstimatorResult;
use crate::geom::{ball_volume, dist_sq, AxisBox, MAX_DIM};
use crate::grid::{HeatOperator, TorusGrid};
use crate::quad::{midpoint_box, simpson};
use crate::rng::stream_rng;
use crate::testfn::TestFunction;

/// Bridge crossing probabilities below `exp(-36)` (about 2e-16) are skipped
/// without drawing a uniform; they cannot influence estimates at f64 scale.
const BRIDGE_LOG_FLOOR: f64 = -36.0;

// ---------------------------------------------------------------------------
// heat kernel
// ---------------------------------------------------------------------------

/// Gaussian transition density `(2 pi t)^(-d/2) exp(-|x|^2 / 2t)` in
/// dimension `x.len()`.
///
/// Negative `t` returns 0 (the convention that makes unrestricted time
/// integrals well defined), and `t = 0` at a nonzero offset returns the
/// limit 0. The only rejected input is the singular corner `t = 0, x = 0`.
pub fn heat_kernel(t: f64, x: &[f64]) -> Result<f64> {
    let d = x.len();
    if d == 0 || d > MAX_DIM {
        return Err(Error::invalid(format!(
            "heat kernel dimension {d} out of range 1..={MAX_DIM}"
        )));
    }
    if t.is_nan() || x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("heat kernel needs finite t and x"));
    }
    if t < 0.0 {
        return Ok(0.0);
    }
    let r2: f64 = x.iter().map(|v| v * v).sum();
    if t == 0.0 {
        if r2 == 0.0 {
            return Err(Error::invalid("heat kernel is singular at t = 0, x = 0"));
        }
        return Ok(0.0);
    }
    Ok((2.0 * PI * t).powf(-0.5 * d as f64) * (-r2 / (2.0 * t)).exp())
}

/// Integral of `s -> heat_kernel(s, x)` over `[t0, t1]` by composite Simpson
/// with `panels` subintervals (even, >= 2).
///
/// For `x != 0` the integrand vanishes to all orders as `s -> 0`, so windows
/// starting at zero need no special treatment.
pub fn heat_kernel_time_integral(x: &[f64], t0: f64, t1: f64, panels: usize) -> Result<f64> {
    if x.is_empty() || x.len() > MAX_DIM {
        return Err(Error::invalid("kernel time integral: dimension out of range"));
    }
    if !(t0.is_finite() && t1.is_finite()) || t0 < 0.0 || t1 <= t0 {
        return Err(Error::invalid(
            "kernel time integral needs finite 0 <= t0 < t1",
        ));
    }
    let r2: f64 = x.iter().map(|v| v * v).sum();
    if r2 == 0.0 && t0 == 0.0 && x.len() >= 2 {
        return Err(Error::invalid(
            "kernel time integral diverges at x = 0 when the window touches s = 0",
        ));
    }
    Ok(simpson(
        &mut |s| {
            if s <= 0.0 {
                0.0
            } else {
                (2.0 * PI * s).powf(-0.5 * x.len() as f64) * (-r2 / (2.0 * s)).exp()
            }
        },
        t0,
        t1,
        panels,
    ))
}

// ---------------------------------------------------------------------------
// semigroup on the periodic box
// ---------------------------------------------------------------------------

/// Runs the heat semigroup for time `t` on a test function sampled over the
/// periodic box described by `grid`, returning the evolved field.
///
/// The action is spectral, hence exact on the torus; choose the box side so
/// that the function's mass near the boundary is negligible when the flat
/// heat flow is the intended reading.
pub fn semigroup_apply(grid: &TorusGrid, phi: &TestFunction, t: f64) -> Result<Vec<f64>> {
    if phi.dim() != grid.d {
        return Err(Error::invalid(format!(
            "test function dimension {} does not match grid dimension {}",
            phi.dim(),
            grid.d
        )));
    }
    phi.validate()?;
    let mut field = grid.sample(&mut |x| phi.eval(x));
    semigroup_apply_field(grid, &mut field, t)?;
    Ok(field)
}

/// Same semigroup action on an already-sampled field, in place.
pub fn semigroup_apply_field(grid: &TorusGrid, field: &mut [f64], t: f64) -> Result<()> {
    if field.len() != grid.len() {
        return Err(Error::invalid(format!(
            "field length {} does not match grid cell count {}",
            field.len(),
            grid.len()
        )));
    }
    if !t.is_finite() || t < 0.0 {
        return Err(Error::invalid("semigroup time must be finite and >= 0"));
    }
    if t > 0.0 {
        HeatOperator::new(grid.clone()).apply(field, t);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// path simulation
// ---------------------------------------------------------------------------

/// A sampled Brownian trajectory on a uniform time grid.
#[derive(Debug, Clone)]
pub struct BrownianPath {
    /// Ambient dimension.
    pub d: usize,
    /// Sample times starting at 0; uniform step apart from a possibly
    /// shorter final step landing exactly on the horizon.
    pub times: Vec<f64>,
    /// Flattened positions, `times.len() * d` entries, point-major.
    pub positions: Vec<f64>,
    /// Seed the trajectory was drawn from.
    pub seed: u64,
}

impl BrownianPath {
    /// Number of sampled time points.
    pub fn len(&self) -> usize {
        self.times.len()
    }

    /// A path always carries at least its starting point.
    pub fn is_empty(&self) -> bool {
        false
    }

    /// Position at time index `i`.
    pub fn position(&self, i: usize) -> &[f64] {
        &self.positions[i * self.d..(i + 1) * self.d]
    }

    /// Final sampled position.
    pub fn endpoint(&self) -> &[f64] {
        self.position(self.len() - 1)
    }
}

/// Samples a Brownian path from `start` up to `horizon` with step `delta`.
///
/// Gaussian increments are exact for Brownian motion, so the only
/// discretisation effect is that the path is observed on a grid; `horizon =
/// 0` yields the single-point path.
pub fn simulate_path(start: &[f64], horizon: f64, delta: f64, seed: u64) -> Result<BrownianPath> {
    let d = start.len();
    if d == 0 || d > MAX_DIM {
        return Err(Error::invalid(format!(
            "path dimension {d} out of range 1..={MAX_DIM}"
        )));
    }
    if start.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("path start must be finite"));
    }
    if !delta.is_finite() || delta <= 0.0 {
        return Err(Error::invalid("path step delta must be finite and > 0"));
    }
    if !horizon.is_finite() || horizon < 0.0 {
        return Err(Error::invalid("path horizon must be finite and >= 0"));
    }
    let full = (horizon / delta).floor() as usize;
    let remainder = horizon - full as f64 * delta;
    let keep_remainder = remainder > 1e-9 * delta;
    let steps = full + usize::from(keep_remainder);
    if steps > 200_000_000 {
        return Err(Error::ResourceLimit(format!(
            "path of {steps} steps exceeds the step budget; increase delta"
        )));
    }

    let mut times = Vec::with_capacity(steps + 1);
    let mut positions = Vec::with_capacity((steps + 1) * d);
    times.push(0.0);
    positions.extend_from_slice(start);

    let mut rng = stream_rng(seed, 0);
    let mut pos = [0.0f64; MAX_DIM];
    pos[..d].copy_from_slice(start);
    for i in 1..=steps {
        let step = if i == steps && keep_remainder {
            remainder
        } else {
            delta
        };
        let sd = step.sqrt();
        for p in pos.iter_mut().take(d) {
            let g: f64 = rng.sample(StandardNormal);
            *p += sd * g;
        }
        let t = if i == steps {
            horizon
        } else {
            i as f64 * delta
        };
        times.push(t);
        positions.extend_from_slice(&pos[..d]);
    }
    Ok(BrownianPath {
        d,
        times,
        positions,
        seed,
    })
}

// ---------------------------------------------------------------------------
// small-ball hitting
// ---------------------------------------------------------------------------

/// Outcome of a hitting-probability run.
#[derive(Debug, Clone)]
pub struct HittingEstimate {
    /// Monte Carlo estimate of the probability of reaching the ball.
    pub estimate: EstimatorResult,
    /// Exact `(radius / |x - z|)^(d-2)` eventual-hit probability; present
    /// only for an unbounded horizon in transient dimensions `d >= 3`.
    pub closed_form: Option<f64>,
}

/// Estimates the probability that Brownian motion started at `x` reaches the
/// closed ball of radius `radius` around `z` by time `horizon`
/// (`f64::INFINITY` is accepted when `d >= 3`).
///
/// Stepping is adaptive: near the target the step is
/// `min(delta, radius^2/4)`, and a path at radial gap `g` from the ball
/// takes steps of about `(g/4)^2` (capped so the horizon stays resolved).
/// Sizing steps by the squared gap keeps the chance of an undetected
/// mid-step crossing below `exp(-32)` per step while letting distant paths
/// advance cheaply. Each step additionally applies the one-dimensional
/// Brownian-bridge crossing probability `exp(-2 g_a g_b / step)` to the
/// radial gap, which recovers excursions that dip into the ball between
/// sample points; its residual bias is the `delta`-halving knob described in
/// the module docs.
///
/// With an unbounded horizon the walk stops at a generous escape radius (or
/// a time cap) and credits the exact remaining hit probability
/// `(radius/dist)^(d-2)` of its final position, so no transient tail is ever
/// simulated and the stopping rule adds no bias.
pub fn hitting_prob(
    x: &[f64],
    z: &[f64],
    radius: f64,
    horizon: f64,
    paths: usize,
    delta: f64,
    seed: u64,
) -> Result<HittingEstimate> {
    let d = x.len();
    if d == 0 || d > MAX_DIM || z.len() != d {
        return Err(Error::invalid(
            "hitting_prob needs matching dimensions 1..=5 for x and z",
        ));
    }
    if x.iter().chain(z.iter()).any(|v| !v.is_finite()) {
        return Err(Error::invalid("hitting_prob needs finite x and z"));
    }
    if !radius.is_finite() || radius <= 0.0 {
        return Err(Error::invalid("hitting_prob radius must be finite and > 0"));
    }
    if !delta.is_finite() || delta <= 0.0 {
        return Err(Error::invalid("hitting_prob delta must be finite and > 0"));
    }
    if paths == 0 {
        return Err(Error::invalid("hitting_prob needs at least one path"));
    }
    if horizon.is_nan() || horizon < 0.0 {
        return Err(Error::invalid("hitting_prob horizon must be >= 0 or infinite"));
    }
    let dist0 = dist_sq(x, z).sqrt();
    if dist0 <= radius {
        return Err(Error::invalid(format!(
            "start at distance {dist0} lies inside the target ball of radius {radius}"
        )));
    }
    let unbounded = horizon.is_infinite();
    if unbounded && d < 3 {
        return Err(Error::invalid(
            "unbounded-horizon hitting needs a transient dimension (d >= 3)",
        ));
    }
    if horizon == 0.0 {
        return Ok(HittingEstimate {
            estimate: EstimatorResult {
                value: 0.0,
                std_error: 0.0,
                n: paths as u64,
                seed,
                wall_time_secs: 0.0,
            },
            closed_form: None,
        });
    }

    let fine = delta.min(0.25 * radius * radius);
    let started = Instant::now();
    let samples: Vec<f64> = if unbounded {
        let escape = 12.0 * dist0;
        let time_cap = 100.0 * dist0 * dist0;
        let cap = (0.5 * dist0 * dist0).max(fine);
        (0..paths)
            .into_par_iter()
            .map(|i| {
                let mut rng = stream_rng(seed, i as u64);
                hit_walk_unbounded(x, z, radius, fine, cap, escape, time_cap, &mut rng)
            })
            .collect()
    } else {
        let cap = (horizon / 40.0).max(fine);
        (0..paths)
            .into_par_iter()
            .map(|i| {
                let mut rng = stream_rng(seed, i as u64);
                f64::from(hit_walk_bounded(x, z, radius, horizon, fine, cap, &mut rng))
            })
            .collect()
    };
    let mut estimate = EstimatorResult::from_samples(&samples, seed);
    estimate.wall_time_secs = started.elapsed().as_secs_f64();
    let closed_form = if unbounded {
        Some((radius / dist0).powi(d as i32 - 2))
    } else {
        None
    };
    Ok(HittingEstimate {
        estimate,
        closed_form,
    })
}

/// One bounded-horizon walk; returns whether the ball was reached.
fn hit_walk_bounded(
    x: &[f64],
    z: &[f64],
    radius: f64,
    horizon: f64,
    fine: f64,
    cap: f64,
    rng: &mut ChaCha8Rng,
) -> bool {
    let d = x.len();
    let mut pos = [0.0f64; MAX_DIM];
    pos[..d].copy_from_slice(x);
    let mut gap = dist_sq(&pos[..d], z).sqrt() - radius;
    let mut t = 0.0;
    let stop = horizon * (1.0 - 1e-12);
    loop {
        if t >= stop {
            return false;
        }
        let step = (0.0625 * gap * gap).clamp(fine, cap).min(horizon - t);
        let sd = step.sqrt();
        for p in pos.iter_mut().take(d) {
            let g: f64 = rng.sample(StandardNormal);
            *p += sd * g;
        }
        let ngap = dist_sq(&pos[..d], z).sqrt() - radius;
        if ngap <= 0.0 {
            return true;
        }
        let expo = -2.0 * gap * ngap / step;
        if expo > BRIDGE_LOG_FLOOR && rng.random::<f64>() < expo.exp() {
            return true;
        }
        gap = ngap;
        t += step;
    }
}

/// One unbounded-horizon walk; returns the per-path contribution in `[0, 1]`
/// (1 on a hit, else the exact remaining hit probability at the stop point).
#[allow(clippy::too_many_arguments)]
fn hit_walk_unbounded(
    x: &[f64],
    z: &[f64],
    radius: f64,
    fine: f64,
    cap: f64,
    escape: f64,
    time_cap: f64,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let d = x.len();
    let mut pos = [0.0f64; MAX_DIM];
    pos[..d].copy_from_slice(x);
    let mut dist = dist_sq(&pos[..d], z).sqrt();
    let mut t = 0.0;
    loop {
        if dist >= escape || t >= time_cap {
            return (radius / dist).powi(d as i32 - 2);
        }
        let gap = dist - radius;
        let step = (0.0625 * gap * gap).clamp(fine, cap);
        let sd = step.sqrt();
        for p in pos.iter_mut().take(d) {
            let g: f64 = rng.sample(StandardNormal);
            *p += sd * g;
        }
        let ndist = dist_sq(&pos[..d], z).sqrt();
        let ngap = ndist - radius;
        if ngap <= 0.0 {
            return 1.0;
        }
        let expo = -2.0 * gap * ngap / step;
        if expo > BRIDGE_LOG_FLOOR && rng.random::<f64>() < expo.exp() {
            return 1.0;
        }
        dist = ndist;
        t += step;
    }
}

// ---------------------------------------------------------------------------
// occupation-time moments
// ---------------------------------------------------------------------------

/// Occupation-moment estimate together with the analytic bound on the mean
/// occupation that the finite window leaves uncounted.
#[derive(Debug, Clone)]
pub struct OccupationEstimate {
    /// Monte Carlo estimate of the requested occupation moment.
    pub estimate: EstimatorResult,
    /// Upper bound on the expected ball occupation after the window's end,
    /// from [`occupation_tail_bound`]; use it to budget effective horizons.
    pub tail_bound: f64,
}

/// Analytic upper bound on the expected time a Brownian path spends in the
/// origin-centred ball of radius `radius` after time `m`, valid for every
/// starting point in transient dimensions:
/// `vol(ball) * (2 pi)^(-d/2) * 2/(d-2) * m^(1 - d/2)`.
///
/// It comes from bounding the in-ball probability by the kernel's peak
/// `(2 pi s)^(-d/2)` and integrating over `[m, infinity)`; near-tight when
/// the path is already close to the ball at time `m`, generous otherwise.
pub fn occupation_tail_bound(d: usize, radius: f64, m: f64) -> Result<f64> {
    if d < 3 || d > MAX_DIM {
        return Err(Error::invalid(
            "occupation tail bound needs a transient dimension (3..=5)",
        ));
    }
    if !radius.is_finite() || radius < 0.0 {
        return Err(Error::invalid("tail bound radius must be finite and >= 0"));
    }
    if !m.is_finite() || m <= 0.0 {
        return Err(Error::invalid("tail bound time must be finite and > 0"));
    }
    let df = d as f64;
    Ok(ball_volume(d, radius) * (2.0 * PI).powf(-0.5 * df) * 2.0 / (df - 2.0)
        * m.powf(1.0 - 0.5 * df))
}

/// Estimates `E[(total time in the origin-centred ball up to horizon)^power]`
/// by trapezoidal path quadrature, alongside the tail bound at `horizon`.
///
/// In-ball time accumulates with weight `(1_in(a) + 1_in(b))/2` per substep,
/// which is first-order unbiased at boundary crossings. Steps are `delta`
/// inside and near the ball and grow quadratically with the radial gap
/// outside (capped at `horizon/40`), so long transient horizons cost only
/// logarithmically many steps.
pub fn occupation_moment(
    start: &[f64],
    radius: f64,
    power: f64,
    horizon: f64,
    paths: usize,
    delta: f64,
    seed: u64,
) -> Result<OccupationEstimate> {
    occupation_moment_windowed(start, radius, power, 0.0, horizon, paths, delta, seed)
}

/// Same estimator restricted to occupation accrued inside `[t_start, t_end]`;
/// paths still run from time zero, so the window sees the correct law.
#[allow(clippy::too_many_arguments)]
pub fn occupation_moment_windowed(
    start: &[f64],
    radius: f64,
    power: f64,
    t_start: f64,
    t_end: f64,
    paths: usize,
    delta: f64,
    seed: u64,
) -> Result<OccupationEstimate> {
    validate_occupation_inputs(start, radius, paths, delta)?;
    if !power.is_finite() || power <= 0.0 {
        return Err(Error::invalid("occupation power must be finite and > 0"));
    }
    if !(t_start.is_finite() && t_end.is_finite()) || t_start < 0.0 || t_end <= t_start {
        return Err(Error::invalid(
            "occupation window needs finite 0 <= t_start < t_end",
        ));
    }
    let d = start.len();
    if radius == 0.0 {
        return Ok(OccupationEstimate {
            estimate: EstimatorResult {
                value: 0.0,
                std_error: 0.0,
                n: paths as u64,
                seed,
                wall_time_secs: 0.0,
            },
            tail_bound: 0.0,
        });
    }
    let marks: Vec<f64> = if t_start > 0.0 {
        vec![t_start, t_end]
    } else {
        vec![t_end]
    };
    let fine = delta;
    let cap = (t_end / 40.0).max(fine);
    let started = Instant::now();
    let samples: Vec<f64> = (0..paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let cum = occupation_walk(start, radius, &marks, fine, cap, &mut rng);
            let occ = if marks.len() == 2 {
                cum[1] - cum[0]
            } else {
                cum[0]
            };
            if power == 1.0 {
                occ
            } else {
                occ.powf(power)
            }
        })
        .collect();
    let mut estimate = EstimatorResult::from_samples(&samples, seed);
    estimate.wall_time_secs = started.elapsed().as_secs_f64();
    Ok(OccupationEstimate {
        estimate,
        tail_bound: occupation_tail_bound(d, radius, t_end)?,
    })
}

/// Raw per-path occupation times of the origin-centred ball over
/// `[0, horizon]`; the building block for estimators that combine
/// occupations nonlinearly (fractional powers, pair sums, couplings).
pub fn occupation_samples(
    start: &[f64],
    radius: f64,
    horizon: f64,
    paths: usize,
    delta: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    validate_occupation_inputs(start, radius, paths, delta)?;
    if !horizon.is_finite() || horizon <= 0.0 {
        return Err(Error::invalid("occupation horizon must be finite and > 0"));
    }
    if radius == 0.0 {
        return Ok(vec![0.0; paths]);
    }
    let marks = [horizon];
    let cap = (horizon / 40.0).max(delta);
    Ok((0..paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            occupation_walk(start, radius, &marks, delta, cap, &mut rng)[0]
        })
        .collect())
}

/// Cumulative ball occupation of each path at every checkpoint time.
///
/// All checkpoints share one trajectory per path (common random numbers), so
/// per-path values are non-decreasing across checkpoints by construction —
/// the right coupling for monotonicity studies. Row `i` of the result holds
/// path `i`'s cumulative occupation at each checkpoint.
pub fn occupation_checkpoint_samples(
    start: &[f64],
    radius: f64,
    checkpoints: &[f64],
    paths: usize,
    delta: f64,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    validate_occupation_inputs(start, radius, paths, delta)?;
    if checkpoints.is_empty() {
        return Err(Error::invalid("need at least one checkpoint"));
    }
    if checkpoints.iter().any(|t| !t.is_finite() || *t <= 0.0)
        || checkpoints.windows(2).any(|w| w[1] <= w[0])
    {
        return Err(Error::invalid(
            "checkpoints must be finite, positive, strictly increasing",
        ));
    }
    if radius == 0.0 {
        return Ok(vec![vec![0.0; checkpoints.len()]; paths]);
    }
    let span = *checkpoints.last().expect("nonempty");
    let cap = (span / 40.0).max(delta);
    Ok((0..paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            occupation_walk(start, radius, checkpoints, delta, cap, &mut rng)
        })
        .collect())
}

fn validate_occupation_inputs(
    start: &[f64],
    radius: f64,
    paths: usize,
    delta: f64,
) -> Result<()> {
    let d = start.len();
    if d < 3 || d > MAX_DIM {
        return Err(Error::invalid(
            "occupation estimators need a transient dimension (3..=5); \
             total ball occupation is a.s. infinite below d = 3",
        ));
    }
    if start.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("occupation start must be finite"));
    }
    if !radius.is_finite() || radius < 0.0 {
        return Err(Error::invalid("occupation radius must be finite and >= 0"));
    }
    if !delta.is_finite() || delta <= 0.0 {
        return Err(Error::invalid("occupation delta must be finite and > 0"));
    }
    if paths == 0 {
        return Err(Error::invalid("occupation needs at least one path"));
    }
    Ok(())
}

/// Walks one path up to the last mark, returning cumulative in-ball time at
/// each mark. Steps land exactly on marks; trapezoidal in-ball weighting.
fn occupation_walk(
    start: &[f64],
    radius: f64,
    marks: &[f64],
    fine: f64,
    cap: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let d = start.len();
    let origin = [0.0f64; MAX_DIM];
    let mut pos = [0.0f64; MAX_DIM];
    pos[..d].copy_from_slice(start);
    let mut out = vec![0.0; marks.len()];
    let mut occ = 0.0;
    let mut t = 0.0;
    let mut gap_a = dist_sq(&pos[..d], &origin[..d]).sqrt() - radius;
    let mut mi = 0;
    while mi < marks.len() {
        let to_mark = marks[mi] - t;
        if to_mark <= 1e-12 * marks[mi].max(1.0) {
            out[mi] = occ;
            mi += 1;
            continue;
        }
        let base = if gap_a <= 0.0 {
            fine
        } else {
            (0.0625 * gap_a * gap_a).clamp(fine, cap)
        };
        let step = base.min(to_mark);
        let sd = step.sqrt();
        for p in pos.iter_mut().take(d) {
            let g: f64 = rng.sample(StandardNormal);
            *p += sd * g;
        }
        let gap_b = dist_sq(&pos[..d], &origin[..d]).sqrt() - radius;
        let inside = f64::from(u8::from(gap_a <= 0.0) + u8::from(gap_b <= 0.0));
        occ += 0.5 * step * inside;
        gap_a = gap_b;
        t += step;
    }
    out
}

// ---------------------------------------------------------------------------
// measures and the pair-interaction energy
// ---------------------------------------------------------------------------

/// Initial measures the estimators accept: uniform mass on a box, a sampled
/// density on a regular subdivision of a box, or a finite list of atoms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeasureSpec {
    /// `density` times Lebesgue measure restricted to `support`.
    LebesgueBox { support: AxisBox, density: f64 },
    /// Piecewise-constant density: one value per cell of the regular
    /// `cells`-per-axis subdivision of `support`, row-major, last axis
    /// fastest.
    GridDensity {
        support: AxisBox,
        cells: usize,
        values: Vec<f64>,
    },
    /// Point masses `masses[i]` at `positions[i*d .. (i+1)*d]`.
    Atoms {
        d: usize,
        positions: Vec<f64>,
        masses: Vec<f64>,
    },
}

impl MeasureSpec {
    /// Ambient dimension.
    pub fn dim(&self) -> usize {
        match self {
            MeasureSpec::LebesgueBox { support, .. } => support.dim(),
            MeasureSpec::GridDensity { support, .. } => support.dim(),
            MeasureSpec::Atoms { d, .. } => *d,
        }
    }

    /// Re-checks every structural invariant; deserialized values can bypass
    /// constructor validation, so call this before trusting a spec.
    pub fn validate(&self) -> Result<()> {
        match self {
            MeasureSpec::LebesgueBox { support, density } => {
                AxisBox::new(support.lo.clone(), support.hi.clone())?;
                if !density.is_finite() || *density < 0.0 {
                    return Err(Error::invalid("measure density must be finite and >= 0"));
                }
            }
            MeasureSpec::GridDensity {
                support,
                cells,
                values,
            } => {
                AxisBox::new(support.lo.clone(), support.hi.clone())?;
                let d = support.dim();
                if *cells == 0 {
                    return Err(Error::invalid("grid measure needs cells >= 1"));
                }
                let expect = (*cells as u128).pow(d as u32);
                if expect > 1 << 27 {
                    return Err(Error::ResourceLimit(format!(
                        "grid measure with {expect} cells exceeds the cell budget"
                    )));
                }
                if values.len() as u128 != expect {
                    return Err(Error::invalid(format!(
                        "grid measure has {} values but {cells}^{d} = {expect} cells",
                        values.len()
                    )));
                }
                if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(Error::invalid("grid measure values must be finite, >= 0"));
                }
            }
            MeasureSpec::Atoms {
                d,
                positions,
                masses,
            } => {
                if *d == 0 || *d > MAX_DIM {
                    return Err(Error::invalid(format!(
                        "atom measure dimension {d} out of range 1..={MAX_DIM}"
                    )));
                }
                if positions.len() != masses.len() * d {
                    return Err(Error::invalid(
                        "atom positions length must be d * number of masses",
                    ));
                }
                if positions.iter().any(|v| !v.is_finite())
                    || masses.iter().any(|m| !m.is_finite() || *m < 0.0)
                {
                    return Err(Error::invalid(
                        "atom positions must be finite and masses finite, >= 0",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Total mass of the measure.
    pub fn total_mass(&self) -> f64 {
        match self {
            MeasureSpec::LebesgueBox { support, density } => density * support.volume(),
            MeasureSpec::GridDensity {
                support,
                cells,
                values,
            } => {
                let d = support.dim();
                let cell: f64 = (0..d)
                    .map(|a| support.side(a) / *cells as f64)
                    .product();
                values.iter().sum::<f64>() * cell
            }
            MeasureSpec::Atoms { masses, .. } => masses.iter().sum(),
        }
    }

    /// Integral of `f` against the measure; continuous parts use midpoint
    /// quadrature with `resolution` nodes per axis.
    pub fn integrate(&self, f: &mut dyn FnMut(&[f64]) -> f64, resolution: usize) -> f64 {
        match self {
            MeasureSpec::LebesgueBox { support, density } => {
                density * midpoint_box(f, support, resolution)
            }
            MeasureSpec::GridDensity {
                support,
                cells,
                values,
            } => {
                let d = support.dim();
                let n = *cells;
                let h: Vec<f64> = (0..d).map(|a| support.side(a) / n as f64).collect();
                let cell: f64 = h.iter().product();
                let mut x = vec![0.0; d];
                let mut acc = 0.0;
                for (idx, v) in values.iter().enumerate() {
                    let mut rem = idx;
                    for a in (0..d).rev() {
                        let i = rem % n;
                        rem /= n;
                        x[a] = support.lo[a] + (i as f64 + 0.5) * h[a];
                    }
                    acc += v * f(&x) * cell;
                }
                acc
            }
            MeasureSpec::Atoms {
                d,
                positions,
                masses,
            } => masses
                .iter()
                .enumerate()
                .map(|(i, m)| m * f(&positions[i * d..(i + 1) * d]))
                .sum(),
        }
    }
}

/// Pair-interaction kernel entering the energy form, as a function of the
/// separation `|x - y|`: constant 1 in d = 3, `log+ (1/|x|)` in d = 4,
/// `|x|^(4-d)` in d >= 5. Zero separation is infinite for d > 3.
pub fn pair_kernel(d: usize, separation: f64) -> Result<f64> {
    if d < 3 || d > MAX_DIM {
        return Err(Error::invalid(
            "pair kernel is defined for dimensions 3..=5",
        ));
    }
    if !separation.is_finite() || separation < 0.0 {
        return Err(Error::invalid("pair kernel separation must be >= 0"));
    }
    Ok(pair_kernel_unchecked(d, separation))
}

#[inline]
fn pair_kernel_unchecked(d: usize, r: f64) -> f64 {
    match d {
        3 => 1.0,
        4 => {
            if r >= 1.0 {
                0.0
            } else if r == 0.0 {
                f64::INFINITY
            } else {
                -r.ln()
            }
        }
        _ => {
            if r == 0.0 {
                f64::INFINITY
            } else {
                r.powi(4 - d as i32)
            }
        }
    }
}

/// Result of the energy form: a finite value or a divergence flag.
#[derive(Debug, Clone, PartialEq)]
pub enum Energy {
    /// The double integral converged to this value.
    Finite(f64),
    /// The double integral diverges; `reason` names the structural cause.
    Infinite { reason: String },
}

impl Energy {
    /// Whether the energy is finite.
    pub fn is_finite(&self) -> bool {
        matches!(self, Energy::Finite(_))
    }

    /// The finite value, if any.
    pub fn finite_value(&self) -> Option<f64> {
        match self {
            Energy::Finite(v) => Some(*v),
            Energy::Infinite { .. } => None,
        }
    }
}

impl std::fmt::Display for Energy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Energy::Finite(v) => write!(f, "{v}"),
            Energy::Infinite { reason } => write!(f, "infinite ({reason})"),
        }
    }
}

/// Energy of `mu` under the exponential weight `exp(-lambda |x|)` on both
/// legs: the double integral of `w(x) w(y) en(x - y)` against `mu x mu`,
/// with `en` from [`pair_kernel`]. Uses a per-dimension default resolution;
/// see [`energy_at_resolution`] for explicit control.
pub fn energy(mu: &MeasureSpec, lambda: f64) -> Result<Energy> {
    let resolution = match mu.dim() {
        3 => 96,
        4 => 10,
        _ => 6,
    };
    energy_at_resolution(mu, lambda, resolution)
}

/// Energy form at an explicit quadrature resolution (nodes per axis for
/// box-supported measures; grid measures use their own cells).
///
/// In d = 3 the kernel is constant, so the form collapses to the square of a
/// single integral. In d >= 4 continuous parts are evaluated by a midpoint
/// double sum that skips same-cell pairs — their contribution vanishes under
/// refinement for these integrable kernels — while atoms carrying positive
/// mass make the diagonal diverge and are flagged infinite outright.
pub fn energy_at_resolution(mu: &MeasureSpec, lambda: f64, resolution: usize) -> Result<Energy> {
    mu.validate()?;
    let d = mu.dim();
    if d < 3 {
        return Err(Error::invalid("energy form needs dimension >= 3"));
    }
    if !lambda.is_finite() || lambda <= 0.0 {
        return Err(Error::invalid("energy weight lambda must be finite and > 0"));
    }
    if resolution == 0 {
        return Err(Error::invalid("energy resolution must be >= 1"));
    }
    if mu.total_mass() == 0.0 {
        return Ok(Energy::Finite(0.0));
    }
    if let MeasureSpec::Atoms { .. } = mu {
        if d > 3 {
            return Ok(Energy::Infinite {
                reason: "atoms carry positive mass, so the diagonal pair meets the \
                         kernel's singularity at zero separation"
                    .into(),
            });
        }
    }
    if d == 3 {
        // en == 1: the form is the square of one weighted integral.
        let single = mu.integrate(&mut |x: &[f64]| (-lambda * norm_of(x)).exp(), resolution);
        return Ok(Energy::Finite(single * single));
    }

    let (centers, masses) = measure_cells(mu, resolution)?;
    let m = masses.len();
    if m > 40_000 {
        return Err(Error::ResourceLimit(format!(
            "energy double sum over {m} cells exceeds the pair budget; \
             lower the resolution"
        )));
    }
    let weights: Vec<f64> = (0..m)
        .map(|i| masses[i] * (-lambda * norm_of(&centers[i * d..(i + 1) * d])).exp())
        .collect();
    let mut acc = 0.0;
    for i in 0..m {
        let wi = weights[i];
        if wi == 0.0 {
            continue;
        }
        let xi = &centers[i * d..(i + 1) * d];
        let mut row = 0.0;
        for j in (i + 1)..m {
            let wj = weights[j];
            if wj == 0.0 {
                continue;
            }
            let r = dist_sq(xi, &centers[j * d..(j + 1) * d]).sqrt();
            row += wj * pair_kernel_unchecked(d, r);
        }
        acc += wi * row;
    }
    Ok(Energy::Finite(2.0 * acc))
}

#[inline]
fn norm_of(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Flattens a continuous measure into (cell centres, cell masses).
fn measure_cells(mu: &MeasureSpec, resolution: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    match mu {
        MeasureSpec::LebesgueBox { support, density } => {
            let d = support.dim();
            let n = resolution;
            let h: Vec<f64> = (0..d).map(|a| support.side(a) / n as f64).collect();
            let cell: f64 = h.iter().product();
            let total = n.pow(d as u32);
            let mut centers = Vec::with_capacity(total * d);
            let mut masses = Vec::with_capacity(total);
            let mut coord = vec![0usize; d];
            for idx in 0..total {
                let mut rem = idx;
                for a in (0..d).rev() {
                    coord[a] = rem % n;
                    rem /= n;
                }
                for a in 0..d {
                    centers.push(support.lo[a] + (coord[a] as f64 + 0.5) * h[a]);
                }
                masses.push(density * cell);
            }
            Ok((centers, masses))
        }
        MeasureSpec::GridDensity {
            support,
            cells,
            values,
        } => {
            let d = support.dim();
            let n = *cells;
            let h: Vec<f64> = (0..d).map(|a| support.side(a) / n as f64).collect();
            let cell: f64 = h.iter().product();
            let mut centers = Vec::with_capacity(values.len() * d);
            let mut masses = Vec::with_capacity(values.len());
            for (idx, v) in values.iter().enumerate() {
                let mut rem = idx;
                let mut coord = vec![0usize; d];
                for a in (0..d).rev() {
                    coord[a] = rem % n;
                    rem /= n;
                }
                for a in 0..d {
                    centers.push(support.lo[a] + (coord[a] as f64 + 0.5) * h[a]);
                }
                masses.push(v * cell);
            }
            Ok((centers, masses))
        }
        MeasureSpec::Atoms { .. } => Err(Error::invalid(
            "atom measures have no cell decomposition",
        )),
    }
}
