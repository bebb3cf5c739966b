//! Experiment harness: versioned configuration, the scale sweep with its
//! bracket statistics, the subcritical decay scan, the quenched variance
//! functional, multi-time moment bounds, and deterministic persistence for
//! all of them.
//!
//! This is the layer the command-line binary drives. Each operation consumes
//! one [`ExperimentConfig`] and produces a report that serialises to CSV and
//! JSON without any wall-clock or host-dependent content, so a rerun with the
//! same configuration and seed reproduces every artifact byte for byte.
//! Within a run, work is parallelised over (scale step, medium replicate)
//! pairs; every pair draws its randomness from a counter-derived stream and
//! results are reduced in a fixed order, so the thread count never changes a
//! number.

use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::brownian::MeasureSpec;
use crate::constants::{estimate_limit_constants, LimitConstants};
use crate::error::{Error, Result};
use crate::estimator::{mean, sample_variance};
use crate::geom::{ball_volume, AxisBox};
use crate::grid::TorusGrid;
use crate::medium::{
    sample_stable_measure, truncation_bias_bound, Boundary, MediumField, MediumRaster,
    SampleConfig, StableMediumSample,
};
use crate::pde::{
    critical_index, fluctuation_functional, heat_flow, pair_with_measure, solve_linearized,
    ScalingConfig,
};
use crate::quad::BallRule;
use crate::reactant::ReactantConfig;
use crate::rng::derive_seed;
use crate::testfn::TestFunction;

/// Version stamp of the configuration and report schemas; configs written by
/// a different schema are rejected on load rather than reinterpreted.
pub const SCHEMA_VERSION: u32 = 1;

/// Hard cap on cells per axis for any solver grid a sweep row may derive.
pub const MAX_RESOLUTION: usize = 256;

/// Cells the solver grid must provide per smoothing radius `1/k` (the
/// rasteriser requires spacing at most a quarter of the radius).
const CELLS_PER_RADIUS: f64 = 4.0;

/// Nodes per axis when pairing solved fields against the initial measure.
const PAIR_RESOLUTION: usize = 32;

/// Simpson intervals for the limit-functional targets.
const TARGET_NODES: usize = 32;

/// Target value of `dt · max(reaction) · max(initial)` when choosing the
/// time-step count for a row; half of the solver's hard gate, so every
/// sampled medium clears the gate with margin.
const REACTION_HEADROOM: f64 = 5.0;

/// Raster values above `ABSORBING_FACTOR · k^d / rho` are clipped before a
/// solve. An atom at that weight already kills the linearised bracket to
/// double precision everywhere in its ball (the kill exponent per crossing is
/// the factor itself), so clipping changes the solution by less than
/// roundoff while bounding the stiffness the time grid must resolve.
const ABSORBING_FACTOR: f64 = 40.0;

/// Time steps per unit time and per `k^2` when choosing a row's time grid:
/// `dt <= 1/(DIFFUSION_RESOLUTION k^2)` keeps one heat step's spread,
/// `sqrt(dt)`, below half an obstacle radius `1/k`. Step-refinement probes at
/// `k = 16` put the splitting bias of the gap functionals at ~7% when the
/// spread reaches the obstacle radius and under 2% at this setting.
const DIFFUSION_RESOLUTION: f64 = 5.0;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

/// Medium-generation settings shared by every row of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MediumSettings {
    /// Atom-weight truncation threshold of the sampler.
    pub eps_min: f64,
    /// Independent medium draws per scale step; one entry per element of the
    /// scale grid. Small scales are cheap and noisy, large scales the
    /// reverse, so the counts are per step rather than global.
    pub samples_per_k: Vec<usize>,
    /// Add the mean of the truncated dust back onto every raster cell (the
    /// ball volume times the analytic mass deficit per unit volume), making
    /// the rasterised field unbiased for the untruncated medium. The
    /// remaining error is the dust's own fluctuation, an order smaller.
    #[serde(default = "default_true")]
    pub compensate_dust: bool,
    /// Reuse one base draw per replicate across the whole scale grid, blown
    /// up by [`transport_medium`]. Each scale step still sees media with
    /// exactly the scaled-sampling law (the transport is an identity in law),
    /// but cross-scale trends are then computed with common random numbers,
    /// which removes most of the medium-sampling noise from trend and slope
    /// estimates. With coupling on, `eps_min` acts at the base scale `k = 1`.
    #[serde(default)]
    pub coupled: bool,
}

fn default_true() -> bool {
    true
}

/// Monte Carlo budgets for the limit-constant estimates a sweep needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Budgets {
    /// Paths (pairs, for the lower constant) per estimator.
    #[serde(default = "default_paths")]
    pub constant_paths: usize,
    /// Occupation horizon for the constant estimators.
    #[serde(default = "default_horizon")]
    pub constant_horizon: f64,
    /// Euler step of the occupation integrals.
    #[serde(default = "default_delta")]
    pub occupation_delta: f64,
    /// Independent replicates for the branching-particle reactant check.
    #[serde(default = "default_reactant_runs")]
    pub reactant_runs: usize,
}

fn default_reactant_runs() -> usize {
    400
}

fn default_paths() -> usize {
    4000
}

fn default_horizon() -> f64 {
    400.0
}

fn default_delta() -> f64 {
    0.05
}

impl Default for Budgets {
    fn default() -> Self {
        Budgets {
            constant_paths: default_paths(),
            constant_horizon: default_horizon(),
            occupation_delta: default_delta(),
            reactant_runs: default_reactant_runs(),
        }
    }
}

/// One experiment: the solve template, the medium settings, the observable,
/// the initial measure, the scale grid, and the randomness root. The
/// template's `k`, `resolution` and `time_steps` are recomputed per scale
/// step; its remaining fields (dimension, indices, horizon, box) apply to
/// every row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub scaling: ScalingConfig,
    pub medium: MediumSettings,
    pub phi: TestFunction,
    pub mu: MeasureSpec,
    /// Observation schedule for the multi-time moment bounds; may be empty.
    #[serde(default)]
    pub schedule: Vec<(f64, TestFunction)>,
    /// Scale steps, strictly increasing.
    pub k_grid: Vec<f64>,
    #[serde(default)]
    pub budgets: Budgets,
    /// Branching-particle settings for the reactant check; optional because
    /// only that subcommand needs them.
    #[serde(default)]
    pub reactant: Option<ReactantConfig>,
    pub seed: u64,
    /// Default artifact directory; the command line can override it.
    #[serde(default)]
    pub out_dir: Option<String>,
}

impl ExperimentConfig {
    /// Structural validation of every field, including that each scale step
    /// derives a legal solver grid.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "config schema version {} does not match this build's {}",
                self.schema_version, SCHEMA_VERSION
            )));
        }
        self.scaling.validate_for_fluctuations()?;
        let d = self.scaling.d;
        self.phi.validate()?;
        if self.phi.dim() != d {
            return Err(Error::invalid(
                "test function dimension does not match the scaling dimension",
            ));
        }
        self.mu.validate()?;
        if self.mu.dim() != d {
            return Err(Error::invalid(
                "initial measure dimension does not match the scaling dimension",
            ));
        }
        for (t, phi) in &self.schedule {
            if !t.is_finite() || *t < 0.0 {
                return Err(Error::invalid("schedule times must be finite and >= 0"));
            }
            phi.validate()?;
            if phi.dim() != d {
                return Err(Error::invalid(
                    "schedule test function dimension does not match the scaling dimension",
                ));
            }
        }
        if self.k_grid.is_empty() {
            return Err(Error::invalid("the scale grid must not be empty"));
        }
        for k in &self.k_grid {
            if !k.is_finite() || *k <= 0.0 {
                return Err(Error::invalid("scale steps must be finite and > 0"));
            }
        }
        if self.k_grid.windows(2).any(|p| p[1] <= p[0]) {
            return Err(Error::invalid("the scale grid must be strictly increasing"));
        }
        if self.medium.samples_per_k.len() != self.k_grid.len() {
            return Err(Error::invalid(format!(
                "samples_per_k has {} entries for {} scale steps",
                self.medium.samples_per_k.len(),
                self.k_grid.len()
            )));
        }
        if self.medium.samples_per_k.iter().any(|&m| m == 0) {
            return Err(Error::invalid("each scale step needs at least one medium"));
        }
        if !self.medium.eps_min.is_finite() || self.medium.eps_min <= 0.0 {
            return Err(Error::invalid("eps_min must be finite and > 0"));
        }
        if self.budgets.constant_paths < 2 {
            return Err(Error::invalid("constant estimates need at least two paths"));
        }
        if !self.budgets.constant_horizon.is_finite() || self.budgets.constant_horizon <= 0.0 {
            return Err(Error::invalid("the constant horizon must be finite and > 0"));
        }
        if !self.budgets.occupation_delta.is_finite() || self.budgets.occupation_delta <= 0.0 {
            return Err(Error::invalid("the occupation step must be finite and > 0"));
        }
        if self.budgets.reactant_runs < 2 {
            return Err(Error::invalid("the reactant check needs at least two runs"));
        }
        if let Some(rc) = &self.reactant {
            rc.validate()?;
        }
        for &k in &self.k_grid {
            self.row_resolution(k)?;
            self.sample_config(k)?.validate()?;
        }
        Ok(())
    }

    /// Order-sensitive hash of the full configuration, stamped into every
    /// report so an artifact can be matched to the exact inputs behind it.
    pub fn content_hash(&self) -> u64 {
        let json = serde_json::to_string(self).expect("config serialises");
        fnv1a64(json.as_bytes())
    }

    /// Cells per axis the solver grid needs at scale step `k`: enough to
    /// resolve the `1/k` smoothing radius, capped so a sweep cannot silently
    /// request an unaffordable grid.
    pub fn row_resolution(&self, k: f64) -> Result<usize> {
        let n = (CELLS_PER_RADIUS * k * self.scaling.side - 1e-9).ceil().max(2.0) as usize;
        if n > MAX_RESOLUTION {
            return Err(Error::invalid(format!(
                "scale step k = {k} needs {n} cells per axis to resolve the \
                 smoothing radius and the cap is {MAX_RESOLUTION}; shrink the \
                 box or drop the largest scale steps"
            )));
        }
        Ok(n)
    }

    /// Sampling window for the medium behind scale step `k`: the reactant box
    /// blown up by `k`, periodic, so no padding.
    pub fn sample_config(&self, k: f64) -> Result<SampleConfig> {
        let d = self.scaling.d;
        let window = AxisBox::new(vec![0.0; d], vec![k * self.scaling.side; d])?;
        Ok(SampleConfig {
            gamma: self.scaling.gamma,
            eps_min: self.medium.eps_min,
            window,
            pad: 0.0,
        })
    }

    /// Solve configuration for scale step `k` at initial-mass exponent
    /// `kappa`. The time grid refines with the larger of two demands: the
    /// strongest reaction the given medium raster carries (so the solver's
    /// splitting gate holds with margin; `medium_max` is that raster's
    /// largest value), and the diffusion scale of the `1/k` obstacles — one
    /// heat step must spread less than an obstacle radius, `sqrt(dt) <~
    /// 1/(2k)`, or the splitting diffuses mass past an obstacle having
    /// applied its absorption only once and the bracket fields come out a few
    /// percent high, worse as `k` grows.
    pub fn row_config(&self, k: f64, kappa: f64, medium_max: f64) -> Result<ScalingConfig> {
        let resolution = self.row_resolution(k)?;
        let a_max = k.powf(2.0 - self.scaling.d as f64) * self.scaling.rho * medium_max;
        let u_max = k.powf(kappa) * self.phi.sup_norm();
        let reaction = (self.scaling.t * a_max * u_max / REACTION_HEADROOM).ceil() as usize;
        let diffusion = (DIFFUSION_RESOLUTION * self.scaling.t * k * k).ceil() as usize;
        let cfg = ScalingConfig {
            k,
            kappa,
            resolution,
            time_steps: self.scaling.time_steps.max(reaction.max(diffusion).max(1)),
            snapshots: 1,
            ..self.scaling.clone()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

// ---------------------------------------------------------------------------
// persistence
// ---------------------------------------------------------------------------

/// Writes any serialisable value as pretty JSON with a trailing newline.
pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut body = serde_json::to_string_pretty(value)?;
    body.push('\n');
    std::fs::write(path, body)?;
    Ok(())
}

/// Writes a validated configuration to disk.
pub fn save_config(path: &Path, config: &ExperimentConfig) -> Result<()> {
    config.validate()?;
    save_json(path, config)
}

/// Reads a configuration back, rejecting schema mismatches before any field
/// is interpreted and validating the rest afterwards.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let body = std::fs::read_to_string(path)?;
    let config: ExperimentConfig = serde_json::from_str(&body)?;
    config.validate()?;
    Ok(config)
}

// ---------------------------------------------------------------------------
// medium preparation
// ---------------------------------------------------------------------------

/// Samples the medium for one scale step and rasterises it onto the row's
/// solver grid: truncation compensation (if enabled) adds the mean dust mass
/// a unit ball loses to the cut, and values above the absorbing threshold
/// are clipped as documented on [`ABSORBING_FACTOR`]. Returns the raster and
/// its maximum value.
fn sample_row_raster(
    config: &ExperimentConfig,
    k: f64,
    resolution: usize,
    seed: u64,
) -> Result<(MediumRaster, f64)> {
    let sample = if config.medium.coupled {
        let base = sample_stable_measure(&config.sample_config(1.0)?, seed)?;
        transport_medium(&base, k)?
    } else {
        sample_stable_measure(&config.sample_config(k)?, seed)?
    };
    // the sample's own threshold, so transported media compensate at the
    // transported cut rather than the base one
    let eps = sample.config.eps_min;
    let mut field = MediumField::new(Arc::new(sample), k, Boundary::Periodic)?;
    let grid = TorusGrid::new(config.scaling.d, resolution, config.scaling.side)?;
    let raster = field.rasterize(&grid)?;
    let mut values = raster.values.clone();
    if config.medium.compensate_dust {
        let dust = ball_volume(config.scaling.d, 1.0)
            * truncation_bias_bound(config.scaling.gamma, eps, 1.0);
        for v in values.iter_mut() {
            *v += dust;
        }
    }
    if config.scaling.rho > 0.0 {
        let clip = ABSORBING_FACTOR * k.powi(config.scaling.d as i32) / config.scaling.rho;
        for v in values.iter_mut() {
            *v = v.min(clip);
        }
    }
    let max = values.iter().copied().fold(0.0f64, f64::max);
    Ok((MediumRaster { grid, values }, max))
}

// ---------------------------------------------------------------------------
// the bracket gap pair
// ---------------------------------------------------------------------------

/// Pairs the initial measure with both linearised bracket gaps for one solve:
/// `⟨mu, g - w⟩` and `⟨mu, g - m⟩`, where `g` is the scaled heat flow and
/// `(w, m)` the lower/upper linearised fields. Since `w <= m <= g` pointwise
/// and the pairing weights are non-negative, the first gap dominates the
/// second and both are non-negative.
pub fn linearized_gap_pair(
    config: &ScalingConfig,
    medium: &MediumRaster,
    phi: &TestFunction,
    mu: &MeasureSpec,
) -> Result<(f64, f64)> {
    let g = heat_flow(config, phi)?;
    let (w, m) = solve_linearized(config, medium, phi)?;
    let grid = config.grid()?;
    let gf = g.final_snapshot();
    let wf = w.final_snapshot();
    let mf = m.final_snapshot();
    let dw: Vec<f64> = gf.iter().zip(wf).map(|(a, b)| a - b).collect();
    let dm: Vec<f64> = gf.iter().zip(mf).map(|(a, b)| a - b).collect();
    let gap_w = pair_with_measure(&grid, &dw, mu, PAIR_RESOLUTION)?;
    let gap_m = pair_with_measure(&grid, &dm, mu, PAIR_RESOLUTION)?;
    Ok((gap_w, gap_m))
}

// ---------------------------------------------------------------------------
// the fluctuation sweep
// ---------------------------------------------------------------------------

/// Per-scale-step statistics of the sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: f64,
    pub resolution: usize,
    /// Largest time-step count any medium of this row required.
    pub max_time_steps: usize,
    pub media: usize,
    pub w_gap_mean: f64,
    pub w_gap_var: f64,
    pub m_gap_mean: f64,
    pub m_gap_var: f64,
    /// Every medium satisfied `w gap >= m gap >= 0`.
    pub bracket_ok: bool,
}

/// Full sweep output: per-step bracket statistics against the two limit
/// targets, plus the monotonicity flags the acceptance checks read.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema_version: u32,
    pub code_version: String,
    pub config_hash: u64,
    pub seed: u64,
    /// Initial-mass exponent of every row: pinned to the critical index.
    pub kappa: f64,
    /// Limit of the `w`-gap means: the fluctuation functional at the upper
    /// constant.
    pub upper_target: f64,
    /// Limit of the `m`-gap means: the functional at the lower constant.
    pub lower_target: f64,
    pub constants: LimitConstants,
    pub rows: Vec<SweepRow>,
    /// `|w_gap_mean - upper_target|` is non-increasing across rows.
    pub upper_trend_ok: bool,
    /// `|m_gap_mean - lower_target|` is non-increasing across rows.
    pub lower_trend_ok: bool,
    /// The across-media `w`-gap variance is non-increasing across rows.
    pub variance_trend_ok: bool,
}

impl SweepReport {
    /// One CSV row per scale step; the targets repeat per row so the file is
    /// self-contained.
    pub fn csv(&self) -> String {
        let mut out = String::from(
            "k,resolution,max_time_steps,media,w_gap_mean,w_gap_var,m_gap_mean,\
             m_gap_var,upper_target,lower_target,bracket_ok\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                r.k,
                r.resolution,
                r.max_time_steps,
                r.media,
                r.w_gap_mean,
                r.w_gap_var,
                r.m_gap_mean,
                r.m_gap_var,
                self.upper_target,
                self.lower_target,
                r.bracket_ok
            ));
        }
        out
    }

    pub fn summary_json(&self) -> Result<String> {
        let mut body = serde_json::to_string_pretty(self)?;
        body.push('\n');
        Ok(body)
    }
}

fn is_nonincreasing(xs: &[f64]) -> bool {
    xs.windows(2).all(|p| p[1] <= p[0] + 1e-12 * p[0].abs().max(1.0))
}

struct RowOutcome {
    k_idx: usize,
    gap_w: f64,
    gap_m: f64,
    time_steps: usize,
}

/// Runs one solve job of a sweep-like scan: sample and rasterise the medium,
/// derive the row configuration, and return the paired gaps.
fn gap_job(
    config: &ExperimentConfig,
    k_idx: usize,
    kappa: f64,
    seed: u64,
) -> Result<RowOutcome> {
    let k = config.k_grid[k_idx];
    let resolution = config.row_resolution(k)?;
    let (raster, max) = sample_row_raster(config, k, resolution, seed)?;
    let row_cfg = config.row_config(k, kappa, max)?;
    let (gap_w, gap_m) = linearized_gap_pair(&row_cfg, &raster, &config.phi, &config.mu)?;
    Ok(RowOutcome {
        k_idx,
        gap_w,
        gap_m,
        time_steps: row_cfg.time_steps,
    })
}

/// Runs the gap jobs for every (scale step, replicate) pair in parallel and
/// returns the outcomes grouped by scale step, in replicate order.
fn run_gap_jobs(config: &ExperimentConfig, kappa: f64) -> Result<Vec<Vec<RowOutcome>>> {
    let mut jobs = Vec::new();
    for (k_idx, &media) in config.medium.samples_per_k.iter().enumerate() {
        for rep in 0..media {
            jobs.push((k_idx, rep));
        }
    }
    let outcomes: Vec<RowOutcome> = jobs
        .par_iter()
        .enumerate()
        .map(|(flat, &(k_idx, rep))| {
            // stream 0 is reserved for the constant estimates; coupled runs
            // key the stream on the replicate alone so every scale step
            // transports the same base draws
            let stream = if config.medium.coupled { rep } else { flat };
            gap_job(config, k_idx, kappa, derive_seed(config.seed, 1 + stream as u64))
        })
        .collect::<Result<_>>()?;
    let mut grouped: Vec<Vec<RowOutcome>> = (0..config.k_grid.len()).map(|_| Vec::new()).collect();
    for o in outcomes {
        let idx = o.k_idx;
        grouped[idx].push(o);
    }
    Ok(grouped)
}

/// The scale sweep at the critical initial-mass exponent: for each scale
/// step, sample media (independent draws, or transported common draws when
/// coupling is on), solve the linearised bracket against each, and reduce the
/// paired gaps `⟨mu, g - w⟩` and `⟨mu, g - m⟩` to means and across-media
/// variances. The report carries the two limit targets (the
/// fluctuation functional at the upper and lower constants, estimated with
/// the configured budgets) and flags whether the distance of each gap mean to
/// its target and the across-media variance shrink as the scale grows.
///
/// The exponent in the configuration template is ignored here: the sweep is
/// only meaningful at the critical index, where the gaps converge to the
/// limit functionals instead of degenerating to zero or infinity.
pub fn run_fluctuation_sweep(config: &ExperimentConfig) -> Result<SweepReport> {
    config.validate()?;
    if config.medium.samples_per_k.iter().any(|&m| m < 2) {
        return Err(Error::invalid(
            "the sweep needs at least two media per scale step; the \
             across-media gap variance is undefined otherwise",
        ));
    }
    let s = &config.scaling;
    let kappa = critical_index(s.gamma, s.d)?;
    let constants = estimate_limit_constants(
        s.d,
        s.gamma,
        s.rho,
        config.budgets.constant_paths,
        config.budgets.constant_horizon,
        config.budgets.occupation_delta,
        derive_seed(config.seed, 0),
    )?;
    let grid = s.grid()?;
    let single = [(s.t, config.phi.clone())];
    let upper_target = fluctuation_functional(
        &config.mu,
        &single,
        constants.c_bar.estimate.value,
        s.gamma,
        &grid,
        TARGET_NODES,
        PAIR_RESOLUTION,
    )?;
    let lower_target = fluctuation_functional(
        &config.mu,
        &single,
        constants.c_under.estimate.value,
        s.gamma,
        &grid,
        TARGET_NODES,
        PAIR_RESOLUTION,
    )?;

    let grouped = run_gap_jobs(config, kappa)?;
    let mut rows = Vec::with_capacity(config.k_grid.len());
    for (k_idx, group) in grouped.iter().enumerate() {
        let k = config.k_grid[k_idx];
        let w: Vec<f64> = group.iter().map(|o| o.gap_w).collect();
        let m: Vec<f64> = group.iter().map(|o| o.gap_m).collect();
        rows.push(SweepRow {
            k,
            resolution: config.row_resolution(k)?,
            max_time_steps: group.iter().map(|o| o.time_steps).max().unwrap_or(0),
            media: group.len(),
            w_gap_mean: mean(&w),
            w_gap_var: sample_variance(&w),
            m_gap_mean: mean(&m),
            m_gap_var: sample_variance(&m),
            bracket_ok: group.iter().all(|o| o.gap_w >= o.gap_m && o.gap_m >= 0.0),
        });
    }
    let upper_dev: Vec<f64> = rows.iter().map(|r| (r.w_gap_mean - upper_target).abs()).collect();
    let lower_dev: Vec<f64> = rows.iter().map(|r| (r.m_gap_mean - lower_target).abs()).collect();
    let w_vars: Vec<f64> = rows.iter().map(|r| r.w_gap_var).collect();
    Ok(SweepReport {
        schema_version: SCHEMA_VERSION,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: config.content_hash(),
        seed: config.seed,
        kappa,
        upper_target,
        lower_target,
        constants,
        rows,
        upper_trend_ok: is_nonincreasing(&upper_dev),
        lower_trend_ok: is_nonincreasing(&lower_dev),
        variance_trend_ok: is_nonincreasing(&w_vars),
    })
}

// ---------------------------------------------------------------------------
// the subcritical decay scan
// ---------------------------------------------------------------------------

/// Per-scale-step statistics of the decay scan.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecayRow {
    pub k: f64,
    pub resolution: usize,
    pub media: usize,
    /// Mean gap `⟨mu, g - w⟩` of the solve at the critical exponent.
    pub critical_gap_mean: f64,
    /// The dominating statistic `k^{kappa - kappa_c}` times the critical gap.
    pub statistic: f64,
}

/// Output of the law-of-large-numbers decay scan.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecayReport {
    pub schema_version: u32,
    pub code_version: String,
    pub config_hash: u64,
    pub seed: u64,
    /// Requested subcritical exponent.
    pub kappa: f64,
    pub kappa_c: f64,
    /// `kappa - kappa_c`: the power the statistic should decay with.
    pub expected_slope: f64,
    pub rows: Vec<DecayRow>,
    /// Least-squares slope of `ln statistic` against `ln k`; absent when the
    /// scan has fewer than two rows or a non-positive statistic.
    pub slope: Option<f64>,
    /// The statistic decreased strictly across rows.
    pub decreasing: bool,
}

impl DecayReport {
    pub fn csv(&self) -> String {
        let mut out = String::from("k,resolution,media,critical_gap_mean,statistic\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.k, r.resolution, r.media, r.critical_gap_mean, r.statistic
            ));
        }
        out
    }

    pub fn summary_json(&self) -> Result<String> {
        let mut body = serde_json::to_string_pretty(self)?;
        body.push('\n');
        Ok(body)
    }
}

fn log_log_slope(ks: &[f64], ys: &[f64]) -> Option<f64> {
    if ks.len() < 2 || ys.iter().any(|&y| y <= 0.0) {
        return None;
    }
    let xs: Vec<f64> = ks.iter().map(|k| k.ln()).collect();
    let ls: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let mx = mean(&xs);
    let my = mean(&ls);
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ls).map(|(x, y)| (x - mx) * (y - my)).sum();
    Some(sxy / sxx)
}

/// The law-of-large-numbers decay scan for a strictly subcritical exponent
/// `kappa`: below the critical index the rescaled process concentrates at its
/// deterministic flow, and the mean defect is dominated by
/// `k^{kappa - kappa_c}` times the gap of the solve at the critical exponent —
/// the factor that stays bounded. The scan therefore solves every medium at
/// the critical exponent, averages the gap per scale step, scales it by
/// `k^{kappa - kappa_c}`, and fits the observed log-log slope, which should
/// track `kappa - kappa_c`.
///
/// A zero horizon short-circuits: the rescaled process starts at its flow, so
/// the statistic is identically zero.
pub fn run_lln(config: &ExperimentConfig) -> Result<DecayReport> {
    let kappa = config.scaling.kappa;
    let kappa_c = critical_index(config.scaling.gamma, config.scaling.d)?;
    if config.scaling.t == 0.0 {
        let mut surrogate = config.clone();
        surrogate.scaling.t = 1.0;
        surrogate.validate()?;
        let rows = config
            .k_grid
            .iter()
            .map(|&k| {
                Ok(DecayRow {
                    k,
                    resolution: config.row_resolution(k)?,
                    media: 0,
                    critical_gap_mean: 0.0,
                    statistic: 0.0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        return Ok(DecayReport {
            schema_version: SCHEMA_VERSION,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config.content_hash(),
            seed: config.seed,
            kappa,
            kappa_c,
            expected_slope: kappa - kappa_c,
            rows,
            slope: None,
            decreasing: false,
        });
    }
    config.validate()?;
    if kappa >= kappa_c - 1e-12 {
        return Err(Error::invalid(format!(
            "the decay scan needs an exponent strictly below the critical \
             index {kappa_c}; got kappa = {kappa}"
        )));
    }
    let grouped = run_gap_jobs(config, kappa_c)?;
    let mut rows = Vec::with_capacity(config.k_grid.len());
    for (k_idx, group) in grouped.iter().enumerate() {
        let k = config.k_grid[k_idx];
        let w: Vec<f64> = group.iter().map(|o| o.gap_w).collect();
        let critical_gap_mean = mean(&w);
        rows.push(DecayRow {
            k,
            resolution: config.row_resolution(k)?,
            media: group.len(),
            critical_gap_mean,
            statistic: k.powf(kappa - kappa_c) * critical_gap_mean,
        });
    }
    let ks: Vec<f64> = rows.iter().map(|r| r.k).collect();
    let stats: Vec<f64> = rows.iter().map(|r| r.statistic).collect();
    Ok(DecayReport {
        schema_version: SCHEMA_VERSION,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: config.content_hash(),
        seed: config.seed,
        kappa,
        kappa_c,
        expected_slope: kappa - kappa_c,
        slope: log_log_slope(&ks, &stats),
        decreasing: stats.windows(2).all(|p| p[1] < p[0]),
        rows,
    })
}

// ---------------------------------------------------------------------------
// the quenched variance functional
// ---------------------------------------------------------------------------

/// Quenched variance of the rescaled pairing for one frozen medium:
///
/// `2 rho k^{2 kappa - 2d + 2} ∫_0^t Σ_j w_j ∫_{B_1(z_j)} (S_u phi)(x/k)^2 dx du`
///
/// with the atoms `(z_j, w_j)` in catalyst coordinates, the time integral by
/// composite Simpson (`time_intervals` even), and each ball integral by the
/// given radius-one rule. The heat flow must have a closed form (a Gaussian
/// bump or a constant); the substitution that pulled the scale out of the
/// time integral already used it, so there is no grid anywhere.
pub fn quenched_variance(
    medium: &StableMediumSample,
    phi: &TestFunction,
    t: f64,
    k: f64,
    kappa: f64,
    rho: f64,
    time_intervals: usize,
    ball: &BallRule,
) -> Result<f64> {
    let d = medium.dim();
    phi.validate()?;
    if phi.dim() != d {
        return Err(Error::invalid(
            "test function dimension does not match the medium",
        ));
    }
    if !t.is_finite() || t < 0.0 {
        return Err(Error::invalid("the horizon must be finite and >= 0"));
    }
    if !k.is_finite() || k <= 0.0 {
        return Err(Error::invalid("the scale k must be finite and > 0"));
    }
    if !kappa.is_finite() {
        return Err(Error::invalid("kappa must be finite"));
    }
    if !rho.is_finite() || rho < 0.0 {
        return Err(Error::invalid("rho must be finite and >= 0"));
    }
    if time_intervals < 2 || time_intervals % 2 != 0 {
        return Err(Error::invalid("Simpson interval count must be even and >= 2"));
    }
    if ball.d != d || (ball.radius - 1.0).abs() > 1e-12 {
        return Err(Error::invalid(
            "the ball rule must be radius one in the medium dimension",
        ));
    }
    let probe = vec![0.0; d];
    if phi.heat_flow_closed_form(0.0, &probe).is_none() {
        return Err(Error::invalid(
            "the quenched variance needs a test function with a closed-form \
             heat flow (a Gaussian bump or a constant)",
        ));
    }
    if t == 0.0 || rho == 0.0 || medium.atom_count() == 0 {
        return Ok(0.0);
    }
    let mut y = vec![0.0; d];
    let mut level = |u: f64| -> f64 {
        let mut acc = 0.0;
        for j in 0..medium.atom_count() {
            let z = medium.position(j);
            let w = medium.weights[j];
            acc += w
                * ball.integrate(z, &mut |x| {
                    for a in 0..d {
                        y[a] = x[a] / k;
                    }
                    let v = phi
                        .heat_flow_closed_form(u, &y)
                        .expect("closed form checked above");
                    v * v
                });
        }
        acc
    };
    let h = t / time_intervals as f64;
    let mut acc = level(0.0) + level(t);
    for i in 1..time_intervals {
        let wgt = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += wgt * level(i as f64 * h);
    }
    let integral = acc * h / 3.0;
    Ok(2.0 * rho * k.powf(2.0 * kappa - 2.0 * d as f64 + 2.0) * integral)
}

/// Transports a sampled medium to scale `k` by the scaling identity: atom
/// positions stretch by `k`, weights by `k^{d/gamma}`, and the window and
/// truncation threshold follow suit, so the result is distributed exactly as
/// a fresh draw on the blown-up window. Transporting one fixed sample across
/// scales removes all sampling noise from cross-scale comparisons.
pub fn transport_medium(base: &StableMediumSample, k: f64) -> Result<StableMediumSample> {
    if !k.is_finite() || k <= 0.0 {
        return Err(Error::invalid("the transport scale must be finite and > 0"));
    }
    let d = base.dim();
    let weight_scale = k.powf(d as f64 / base.config.gamma);
    let config = SampleConfig {
        gamma: base.config.gamma,
        eps_min: base.config.eps_min * weight_scale,
        window: base.config.window.scaled(k),
        pad: base.config.pad * k,
    };
    let positions: Vec<f64> = base.positions.iter().map(|p| p * k).collect();
    let weights: Vec<f64> = base.weights.iter().map(|w| w * weight_scale).collect();
    StableMediumSample::from_atoms(config, positions, weights)
}

// ---------------------------------------------------------------------------
// multi-time moment bounds
// ---------------------------------------------------------------------------

/// Exponential moment bounds for a multi-time observation schedule: the
/// fluctuation functional at the upper and lower limit constants, each
/// exponentiated. Returns `(upper, lower)`; an empty schedule gives `(1, 1)`
/// because the functional vanishes.
pub fn evaluate_multitime_bounds(
    mu: &MeasureSpec,
    schedule: &[(f64, TestFunction)],
    gamma: f64,
    constants: &LimitConstants,
    grid: &TorusGrid,
    nodes: usize,
    resolution: usize,
) -> Result<(f64, f64)> {
    let upper = fluctuation_functional(
        mu,
        schedule,
        constants.c_bar.estimate.value,
        gamma,
        grid,
        nodes,
        resolution,
    )?
    .exp();
    let lower = fluctuation_functional(
        mu,
        schedule,
        constants.c_under.estimate.value,
        gamma,
        grid,
        nodes,
        resolution,
    )?
    .exp();
    Ok((upper, lower))
}

// ---------------------------------------------------------------------------
// worker-count override
// ---------------------------------------------------------------------------

/// Parses a worker-count override; `None` for anything but a positive count.
pub fn parse_worker_count(raw: &str) -> Option<usize> {
    raw.trim().parse::<usize>().ok().filter(|&n| n > 0)
}

/// Reads the `SCLAB_WORKERS` override from the environment.
pub fn worker_count_from_env() -> Option<usize> {
    std::env::var("SCLAB_WORKERS").ok().and_then(|s| parse_worker_count(&s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constants::{BiasDirection, ConstantEstimate};
    use crate::estimator::EstimatorResult;
    use crate::pde::solve_limit_mild;
    use crate::quad::BallStencil;
    use approx::assert_relative_eq;

    fn small_config() -> ExperimentConfig {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            scaling: ScalingConfig {
                d: 3,
                gamma: 0.8,
                rho: 1.0,
                k: 1.0,
                kappa: 0.1,
                t: 0.2,
                time_steps: 16,
                snapshots: 1,
                side: 1.0,
                resolution: 16,
            },
            medium: MediumSettings {
                eps_min: 0.05,
                samples_per_k: vec![2, 2],
                compensate_dust: true,
                coupled: false,
            },
            phi: TestFunction::ConstantOnTorus { d: 3, theta: 0.3 },
            mu: MeasureSpec::LebesgueBox {
                support: AxisBox::new(vec![0.0; 3], vec![1.0; 3]).unwrap(),
                density: 1.0,
            },
            schedule: Vec::new(),
            k_grid: vec![2.0, 4.0],
            budgets: Budgets {
                constant_paths: 300,
                constant_horizon: 150.0,
                occupation_delta: 0.1,
                reactant_runs: 100,
            },
            reactant: None,
            seed: 2026,
            out_dir: None,
        }
    }

    fn hand_constants() -> LimitConstants {
        let est = |value: f64| ConstantEstimate {
            estimate: EstimatorResult {
                value,
                std_error: 0.0,
                n: 1,
                seed: 0,
                wall_time_secs: 0.0,
            },
            truncation: 0.0,
            bias: BiasDirection::Down,
            horizon: 1.0,
        };
        LimitConstants {
            c_bar: est(3.0),
            c_under: est(2.0),
            c_ba1: crate::constants::c_ba1(3).unwrap(),
            d: 3,
            gamma: 0.8,
            rho: 1.0,
        }
    }

    #[test]
    fn validation_rejects_the_bad_configurations() {
        let good = small_config();
        assert!(good.validate().is_ok());

        let mut bad = good.clone();
        bad.schema_version = SCHEMA_VERSION + 1;
        assert!(matches!(bad.validate().unwrap_err(), Error::Format(_)));

        let mut bad = good.clone();
        bad.k_grid = vec![4.0, 2.0];
        let msg = bad.validate().unwrap_err().to_string();
        assert!(msg.contains("strictly increasing"), "{msg}");

        let mut bad = good.clone();
        bad.medium.samples_per_k = vec![2];
        assert!(bad.validate().is_err());

        let mut bad = good.clone();
        bad.k_grid = vec![2.0, 80.0];
        bad.medium.samples_per_k = vec![2, 2];
        let msg = bad.validate().unwrap_err().to_string();
        assert!(msg.contains("cap"), "{msg}");

        let mut bad = good.clone();
        bad.phi = TestFunction::ConstantOnTorus { d: 4, theta: 0.3 };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_persistence_round_trips_and_rejects_other_schemas() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        let config = small_config();
        save_config(&path, &config).unwrap();
        let back = load_config(&path).unwrap();
        assert_eq!(back, config);
        assert_eq!(back.content_hash(), config.content_hash());

        let tampered = std::fs::read_to_string(&path)
            .unwrap()
            .replace("\"schema_version\": 1", "\"schema_version\": 99");
        std::fs::write(&path, tampered).unwrap();
        assert!(matches!(load_config(&path).unwrap_err(), Error::Format(_)));
    }

    #[test]
    fn row_derivation_scales_the_resolution_with_k() {
        let config = small_config();
        assert_eq!(config.row_resolution(2.0).unwrap(), 8);
        assert_eq!(config.row_resolution(4.0).unwrap(), 16);
        assert_eq!(config.row_resolution(64.0).unwrap(), 256);
        assert!(config.row_resolution(65.0).is_err());

        // a stiff medium forces more time steps, a mild one keeps the base
        let mild = config.row_config(2.0, 0.2, 1.0).unwrap();
        assert_eq!(mild.time_steps, 16);
        let stiff = config.row_config(2.0, 0.2, 1e4).unwrap();
        assert!(stiff.time_steps > 16);
        assert_eq!(stiff.snapshots, 1);

        // large scale steps refine the time grid even for a mild medium:
        // dt must stay below the obstacle-diffusion scale 1/(5 k^2)
        let fine = config.row_config(16.0, 0.2, 1.0).unwrap();
        assert_eq!(fine.time_steps, (5.0f64 * 0.2 * 256.0).ceil() as usize);
    }

    #[test]
    fn constant_medium_gaps_match_the_scalar_law() {
        // On a constant medium with a constant observable the bracket solves
        // collapse to scalar equations with closed forms:
        //   w(t) = u0 e^{-a u0 t},  m(t) = u0 - (u0/2)(1 - e^{-2 a u0 t}),
        // so both gaps are known exactly.
        let cfg = ScalingConfig {
            d: 3,
            gamma: 0.8,
            rho: 0.6,
            k: 2.0,
            kappa: 0.15,
            t: 0.25,
            time_steps: 400,
            snapshots: 1,
            side: 1.0,
            resolution: 8,
        };
        let grid = cfg.grid().unwrap();
        let raster = MediumRaster {
            grid: grid.clone(),
            values: vec![1.3; grid.len()],
        };
        let phi = TestFunction::ConstantOnTorus { d: 3, theta: 0.4 };
        let mu = MeasureSpec::LebesgueBox {
            support: AxisBox::new(vec![0.0; 3], vec![1.0; 3]).unwrap(),
            density: 2.0,
        };
        let (gap_w, gap_m) = linearized_gap_pair(&cfg, &raster, &phi, &mu).unwrap();
        let u0 = 2.0f64.powf(0.15) * 0.4;
        let a = 2.0f64.powf(-1.0) * 0.6 * 1.3;
        let mass = 2.0;
        let exact_w = mass * u0 * (1.0 - (-a * u0 * cfg.t).exp());
        let exact_m = mass * (u0 / 2.0) * (1.0 - (-2.0 * a * u0 * cfg.t).exp());
        assert_relative_eq!(gap_w, exact_w, max_relative = 5e-3);
        assert_relative_eq!(gap_m, exact_m, max_relative = 5e-3);
        assert!(gap_w > gap_m && gap_m > 0.0);
    }

    #[test]
    fn sweep_produces_ordered_deterministic_reports() {
        let config = small_config();
        let report = run_fluctuation_sweep(&config).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert_eq!(report.config_hash, config.content_hash());
        assert_relative_eq!(report.kappa, 2.0 / 9.0, max_relative = 1e-12);
        assert!(report.upper_target > report.lower_target);
        assert!(report.lower_target > 0.0);
        for row in &report.rows {
            assert!(row.bracket_ok);
            assert!(row.w_gap_mean >= row.m_gap_mean && row.m_gap_mean > 0.0);
            assert!(row.w_gap_var.is_finite() && row.w_gap_var >= 0.0);
        }
        assert_eq!(report.rows[0].resolution, 8);
        assert_eq!(report.rows[1].resolution, 16);

        let again = run_fluctuation_sweep(&config).unwrap();
        assert_eq!(report.csv(), again.csv());
        assert_eq!(
            report.summary_json().unwrap(),
            again.summary_json().unwrap()
        );

        let mut reseeded = config.clone();
        reseeded.seed = 77;
        let other = run_fluctuation_sweep(&reseeded).unwrap();
        assert_ne!(report.rows[0].w_gap_mean, other.rows[0].w_gap_mean);
    }

    #[test]
    fn sweep_with_a_single_medium_errors() {
        let mut config = small_config();
        config.medium.samples_per_k = vec![2, 1];
        let msg = run_fluctuation_sweep(&config).unwrap_err().to_string();
        assert!(msg.contains("two media"), "{msg}");
    }

    #[test]
    fn decay_scan_reports_the_dominating_statistic() {
        let config = small_config();
        let report = run_lln(&config).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert_relative_eq!(report.expected_slope, 0.1 - 2.0 / 9.0, max_relative = 1e-12);
        for row in &report.rows {
            assert!(row.critical_gap_mean > 0.0);
            let expected = row.k.powf(report.kappa - report.kappa_c) * row.critical_gap_mean;
            assert_relative_eq!(row.statistic, expected, max_relative = 1e-12);
        }
        let again = run_lln(&config).unwrap();
        assert_eq!(report.csv(), again.csv());
    }

    #[test]
    fn decay_scan_rejects_critical_and_supercritical_exponents() {
        let mut config = small_config();
        config.scaling.kappa = 2.0 / 9.0;
        let msg = run_lln(&config).unwrap_err().to_string();
        assert!(msg.contains("strictly below"), "{msg}");
    }

    #[test]
    fn decay_scan_zero_horizon_is_identically_zero() {
        let mut config = small_config();
        config.scaling.t = 0.0;
        let report = run_lln(&config).unwrap();
        assert!(report.rows.iter().all(|r| r.statistic == 0.0));
        assert!(report.slope.is_none());
    }

    #[test]
    fn quenched_variance_degenerate_cases_vanish() {
        let sc = SampleConfig {
            gamma: 0.8,
            eps_min: 0.1,
            window: AxisBox::centered_cube(3, 1.0).unwrap(),
            pad: 0.0,
        };
        let medium = sample_stable_measure(&sc, 5).unwrap();
        let ball = BallRule::new(3, 1.0, 4);
        let phi = TestFunction::GaussianBump {
            center: vec![0.0; 3],
            sigma: 0.5,
            amplitude: 1.0,
        };
        // zero horizon, zero coupling, zero amplitude
        assert_eq!(
            quenched_variance(&medium, &phi, 0.0, 2.0, 0.5, 1.0, 4, &ball).unwrap(),
            0.0
        );
        assert_eq!(
            quenched_variance(&medium, &phi, 0.3, 2.0, 0.5, 0.0, 4, &ball).unwrap(),
            0.0
        );
        let zero = TestFunction::GaussianBump {
            center: vec![0.0; 3],
            sigma: 0.5,
            amplitude: 0.0,
        };
        assert_eq!(
            quenched_variance(&medium, &zero, 0.3, 2.0, 0.5, 1.0, 4, &ball).unwrap(),
            0.0
        );
        // structural rejections: odd intervals, no closed form, bad rule
        assert!(quenched_variance(&medium, &phi, 0.3, 2.0, 0.5, 1.0, 3, &ball).is_err());
        let exp = TestFunction::Exponential {
            d: 3,
            lambda: 1.0,
            amplitude: 1.0,
        };
        assert!(quenched_variance(&medium, &exp, 0.3, 2.0, 0.5, 1.0, 4, &ball).is_err());
        let wrong_ball = BallRule::new(3, 0.5, 4);
        assert!(quenched_variance(&medium, &phi, 0.3, 2.0, 0.5, 1.0, 4, &wrong_ball).is_err());
    }

    #[test]
    fn quenched_variance_survives_quadrature_refinement() {
        // Three atoms placed by hand; refining both the time grid and the
        // ball rule must not move the value, and an independent midpoint
        // stencil must agree.
        let sc = SampleConfig {
            gamma: 0.7,
            eps_min: 0.1,
            window: AxisBox::centered_cube(3, 6.0).unwrap(),
            pad: 0.0,
        };
        let medium = StableMediumSample::from_atoms(
            sc,
            vec![0.5, 0.0, -0.3, -1.0, 1.2, 0.8, 2.0, -0.5, 0.1],
            vec![0.8, 1.5, 0.4],
        )
        .unwrap();
        let phi = TestFunction::GaussianBump {
            center: vec![0.2, 0.0, 0.0],
            sigma: 0.6,
            amplitude: 1.0,
        };
        let coarse = quenched_variance(
            &medium,
            &phi,
            0.4,
            3.0,
            0.5,
            1.3,
            8,
            &BallRule::new(3, 1.0, 6),
        )
        .unwrap();
        let fine = quenched_variance(
            &medium,
            &phi,
            0.4,
            3.0,
            0.5,
            1.3,
            16,
            &BallRule::new(3, 1.0, 12),
        )
        .unwrap();
        assert!(coarse > 0.0);
        assert_relative_eq!(coarse, fine, max_relative = 1e-3);

        // cross-check the inner ball integrals against the midpoint stencil
        let stencil = BallStencil::new(3, 1.0, 40);
        let mut level = |u: f64| -> f64 {
            let mut acc = 0.0;
            for j in 0..medium.atom_count() {
                acc += medium.weights[j]
                    * stencil.integrate(medium.position(j), &mut |x| {
                        let y: Vec<f64> = x.iter().map(|v| v / 3.0).collect();
                        let v = phi.heat_flow_closed_form(u, &y).unwrap();
                        v * v
                    });
            }
            acc
        };
        let h = 0.4 / 8.0;
        let mut acc = level(0.0) + level(0.4);
        for i in 1..8 {
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * level(i as f64 * h);
        }
        let reference =
            2.0 * 1.3 * 3.0f64.powf(2.0 * 0.5 - 6.0 + 2.0) * (acc * h / 3.0);
        assert_relative_eq!(coarse, reference, max_relative = 2e-2);
    }

    #[test]
    fn transported_media_obey_the_scaling_identity() {
        let sc = SampleConfig {
            gamma: 0.8,
            eps_min: 0.05,
            window: AxisBox::centered_cube(3, 2.0).unwrap(),
            pad: 0.0,
        };
        let base = sample_stable_measure(&sc, 99).unwrap();
        assert!(base.atom_count() > 0);
        let moved = transport_medium(&base, 2.0).unwrap();
        assert_eq!(moved.atom_count(), base.atom_count());
        let ws = 2.0f64.powf(3.0 / 0.8);
        assert_relative_eq!(moved.weights[0], base.weights[0] * ws, max_relative = 1e-12);
        assert_relative_eq!(moved.position(0)[1], base.position(0)[1] * 2.0, max_relative = 1e-12);
        assert_relative_eq!(moved.config.eps_min, 0.05 * ws, max_relative = 1e-12);

        // transporting twice composes
        let twice = transport_medium(&moved, 2.0).unwrap();
        let direct = transport_medium(&base, 4.0).unwrap();
        assert_relative_eq!(twice.weights[1], direct.weights[1], max_relative = 1e-12);
        assert_relative_eq!(
            twice.config.eps_min,
            direct.config.eps_min,
            max_relative = 1e-12
        );
        assert!(transport_medium(&base, 0.0).is_err());
    }

    #[test]
    fn coupled_rows_transport_one_base_draw() {
        // with coupling on, the row raster at scale k must equal the raster
        // of the hand-transported base draw, dust-compensated at the
        // transported threshold
        let mut cfg = small_config();
        cfg.medium.coupled = true;
        cfg.medium.eps_min = 0.01;
        let seed = derive_seed(cfg.seed, 1);
        let k = 2.0;
        let resolution = cfg.row_resolution(k).unwrap();
        let (raster, max) = sample_row_raster(&cfg, k, resolution, seed).unwrap();

        let base = sample_stable_measure(&cfg.sample_config(1.0).unwrap(), seed).unwrap();
        assert!(base.atom_count() >= 2, "need atoms for a meaningful check");
        let moved = transport_medium(&base, k).unwrap();
        let eps_moved = moved.config.eps_min;
        assert_relative_eq!(eps_moved, 0.01 * k.powf(3.0 / 0.8), max_relative = 1e-12);
        let mut field = MediumField::new(Arc::new(moved), k, Boundary::Periodic).unwrap();
        let grid = TorusGrid::new(3, resolution, 1.0).unwrap();
        let by_hand = field.rasterize(&grid).unwrap();
        let dust = ball_volume(3, 1.0) * truncation_bias_bound(0.8, eps_moved, 1.0);
        for (a, b) in raster.values.iter().zip(&by_hand.values) {
            assert_relative_eq!(*a, b + dust, max_relative = 1e-12);
        }
        assert!(max > 0.0);

        // the same replicate stream at another scale reuses the same base
        // atoms: atom masses in any fixed sub-box agree after unscaling
        let (other, _) = sample_row_raster(&cfg, 4.0, cfg.row_resolution(4.0).unwrap(), seed)
            .unwrap();
        assert_ne!(other.values, raster.values);
        let coarse: f64 = raster.values.iter().sum::<f64>() / raster.values.len() as f64;
        let fine: f64 = other.values.iter().sum::<f64>() / other.values.len() as f64;
        // mean cell value scales like the weight blow-up times the ball
        // fraction of the window, k^{d/gamma - d}, up to the lattice's
        // ball-coverage granularity
        let predicted = 2.0f64.powf(3.0 / 0.8 - 3.0);
        let dust4 = ball_volume(3, 1.0)
            * truncation_bias_bound(0.8, 0.01 * 4.0f64.powf(3.0 / 0.8), 1.0);
        assert_relative_eq!(
            (fine - dust4) / (coarse - dust),
            predicted,
            max_relative = 0.15
        );
    }

    #[test]
    fn variance_scaling_has_a_threshold_at_the_variance_index() {
        // d = 5, gamma = 0.8: the variance index is 0.875. Transport one
        // fixed medium across scales so the comparison is exact in law, and
        // watch the scaled variance: above the index it must grow with k,
        // below it must shrink. The exponent enters only through the
        // prefactor, so the two scans must also agree after unwinding it.
        let d = 5;
        let gamma = 0.8;
        let idx = crate::pde::variance_index(gamma, d).unwrap();
        assert_relative_eq!(idx, 0.875, max_relative = 1e-12);
        let sc = SampleConfig {
            gamma,
            eps_min: 0.1,
            window: AxisBox::centered_cube(d, 3.0).unwrap(),
            pad: 0.0,
        };
        let base = sample_stable_measure(&sc, 314).unwrap();
        assert!(base.atom_count() > 50);
        let phi = TestFunction::GaussianBump {
            center: vec![0.0; d],
            sigma: 0.5,
            amplitude: 1.0,
        };
        let ball = BallRule::new(d, 1.0, 4);
        let scan = |kappa: f64| -> Vec<f64> {
            [2.0f64, 4.0, 8.0]
                .iter()
                .map(|&k| {
                    let medium = transport_medium(&base, k).unwrap();
                    quenched_variance(&medium, &phi, 0.3, k, kappa, 1.0, 8, &ball).unwrap()
                })
                .collect()
        };
        let above = scan(idx + 0.2);
        let below = scan(idx - 0.2);
        assert!(above.windows(2).all(|p| p[1] > p[0]), "{above:?}");
        assert!(below.windows(2).all(|p| p[1] < p[0]), "{below:?}");
        for (i, &k) in [2.0f64, 4.0, 8.0].iter().enumerate() {
            assert_relative_eq!(
                above[i] / below[i],
                k.powf(2.0 * 0.4),
                max_relative = 1e-10
            );
        }
    }

    #[test]
    fn multitime_bounds_bracket_and_collapse_to_the_mild_solution() {
        let constants = hand_constants();
        let grid = TorusGrid::new(3, 16, 1.0).unwrap();
        let mu = MeasureSpec::LebesgueBox {
            support: AxisBox::new(vec![0.0; 3], vec![1.0; 3]).unwrap(),
            density: 1.0,
        };
        let (u_empty, l_empty) =
            evaluate_multitime_bounds(&mu, &[], 0.8, &constants, &grid, 16, 16).unwrap();
        assert_eq!((u_empty, l_empty), (1.0, 1.0));

        let phi = TestFunction::GaussianBump {
            center: vec![0.5; 3],
            sigma: 0.15,
            amplitude: 0.8,
        };
        let schedule = vec![(0.3, phi.clone())];
        let (upper, lower) =
            evaluate_multitime_bounds(&mu, &schedule, 0.8, &constants, &grid, 16, 16).unwrap();
        assert!(upper > lower && lower > 1.0);

        // a single-time schedule is the mild solution paired with mu
        let mild = solve_limit_mild(3.0, &phi, 0.3, 0.8, &grid, 1, 16).unwrap();
        let paired = pair_with_measure(&grid, mild.final_snapshot(), &mu, 16).unwrap();
        assert_relative_eq!(upper.ln(), paired, max_relative = 1e-12);
    }

    #[test]
    fn worker_count_parses_only_positive_integers() {
        assert_eq!(parse_worker_count("3"), Some(3));
        assert_eq!(parse_worker_count(" 2 "), Some(2));
        assert_eq!(parse_worker_count("0"), None);
        assert_eq!(parse_worker_count("-1"), None);
        assert_eq!(parse_worker_count("many"), None);
    }
}
