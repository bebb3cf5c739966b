//! Grid solvers for the scaled reaction–diffusion log-Laplace equation
//! `∂_t u = ½Δu − a(x) u²` with `a = k^{2-d} ϱ · (medium at k x)`, its two
//! bracketing linearizations, the limiting mild solution driven by a
//! `(1+γ)`-power source, and the multi-time functional built from it.
//!
//! All schemes compose exact sub-steps — spectral heat flow on the periodic
//! box and pointwise closed-form reaction updates — via Strang splitting.
//! That buys unconditional stability, positivity, and, more importantly, the
//! pointwise ordering `lower ≤ nonlinear ≤ upper ≤ heat flow` *exactly* at
//! every grid point and time level (the discrete reaction factors satisfy
//! `e^{-x} ≤ 1/(1+x)` and heat preserves order), so order-based tests need
//! no scheme-error tolerance.

use std::io::{Read as IoRead, Write as IoWrite};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::brownian::MeasureSpec;
use crate::error::{Error, Result};
use crate::grid::{HeatOperator, TorusGrid};
use crate::medium::MediumRaster;
use crate::testfn::TestFunction;

/// Storage cap per returned field, in f64 values across all recorded levels.
const MAX_FIELD_VALUES: u128 = 1 << 25;

/// Reaction-resolution gate: a time step with `Δt · max(a) · max(u₀)` above
/// this is rejected — the pointwise updates would still be stable, but the
/// splitting no longer resolves the reaction against the diffusion.
const MAX_REACTION_STEP: f64 = 10.0;

// ---------------------------------------------------------------------------
// scaling configuration and indices
// ---------------------------------------------------------------------------

/// Parameters of one scaled solve: ambient dimension, medium stability index
/// `gamma`, coupling `rho`, scale `k`, initial-mass exponent `kappa` (the
/// initial condition is `k^kappa · phi`), horizon and time grid, and the
/// periodic box (side and cells per axis).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingConfig {
    pub d: usize,
    pub gamma: f64,
    pub rho: f64,
    pub k: f64,
    pub kappa: f64,
    /// Time horizon; solves run over `[0, t]`.
    pub t: f64,
    /// Number of uniform integration steps.
    pub time_steps: usize,
    /// Number of recorded post-initial levels; must divide `time_steps`.
    #[serde(default = "default_snapshots")]
    pub snapshots: usize,
    /// Periodic box side.
    pub side: f64,
    /// Grid cells per axis.
    pub resolution: usize,
}

fn default_snapshots() -> usize {
    1
}

impl ScalingConfig {
    /// Checks every structural invariant, including the supercritical
    /// regime `d · gamma > 2` and the snapshot storage budget.
    pub fn validate(&self) -> Result<()> {
        if self.d < 3 || self.d > crate::geom::MAX_DIM {
            return Err(Error::invalid(format!(
                "scaling dimension {} out of range 3..={}",
                self.d,
                crate::geom::MAX_DIM
            )));
        }
        if !self.gamma.is_finite() || self.gamma <= 0.0 || self.gamma >= 1.0 {
            return Err(Error::invalid("gamma must lie in (0, 1)"));
        }
        if self.d as f64 * self.gamma <= 2.0 {
            return Err(Error::invalid(format!(
                "subcritical parameters: d * gamma = {} <= 2 (critical scaling \
                 index would be {})",
                self.d as f64 * self.gamma,
                (self.gamma * self.d as f64 - 2.0) / (1.0 + self.gamma)
            )));
        }
        if !self.rho.is_finite() || self.rho < 0.0 {
            return Err(Error::invalid("rho must be finite and >= 0"));
        }
        if !self.k.is_finite() || self.k <= 0.0 {
            return Err(Error::invalid("k must be finite and > 0"));
        }
        if !self.kappa.is_finite() || self.kappa < 0.0 {
            return Err(Error::invalid("kappa must be finite and >= 0"));
        }
        if !self.t.is_finite() || self.t <= 0.0 {
            return Err(Error::invalid("time horizon must be finite and > 0"));
        }
        if self.time_steps == 0 {
            return Err(Error::invalid("need at least one time step"));
        }
        if self.snapshots == 0 || self.time_steps % self.snapshots != 0 {
            return Err(Error::invalid(format!(
                "snapshots ({}) must be >= 1 and divide time_steps ({})",
                self.snapshots, self.time_steps
            )));
        }
        if !self.side.is_finite() || self.side <= 0.0 {
            return Err(Error::invalid("box side must be finite and > 0"));
        }
        if self.resolution < 2 {
            return Err(Error::invalid("resolution must be >= 2 cells per axis"));
        }
        let cells = (self.resolution as u128).pow(self.d as u32);
        if (self.snapshots as u128 + 1) * cells > MAX_FIELD_VALUES {
            return Err(Error::ResourceLimit(format!(
                "{} snapshots of {cells} cells exceed the field storage budget; \
                 record fewer levels or coarsen the grid",
                self.snapshots + 1
            )));
        }
        Ok(())
    }

    /// Additional gate for runs that feed fluctuation statistics: `kappa`
    /// must not exceed the critical scaling index.
    pub fn validate_for_fluctuations(&self) -> Result<()> {
        self.validate()?;
        let kc = critical_index(self.gamma, self.d)?;
        if self.kappa > kc + 1e-12 {
            return Err(Error::invalid(format!(
                "kappa = {} exceeds the critical scaling index {kc}",
                self.kappa
            )));
        }
        Ok(())
    }

    /// The periodic grid the solve runs on.
    pub fn grid(&self) -> Result<TorusGrid> {
        TorusGrid::new(self.d, self.resolution, self.side)
    }

    /// Scale factor on the initial condition, `k^kappa`.
    pub fn initial_scale(&self) -> f64 {
        self.k.powf(self.kappa)
    }

    /// Scale factor on the reaction coefficient, `k^{2-d} · rho`.
    pub fn reaction_scale(&self) -> f64 {
        self.k.powf(2.0 - self.d as f64) * self.rho
    }

    /// Order-insensitive content hash used to stamp emitted fields.
    pub fn content_hash(&self) -> u64 {
        let mut bytes = Vec::with_capacity(96);
        bytes.extend_from_slice(&(self.d as u64).to_le_bytes());
        for v in [self.gamma, self.rho, self.k, self.kappa, self.t, self.side] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for v in [self.time_steps, self.snapshots, self.resolution] {
            bytes.extend_from_slice(&(v as u64).to_le_bytes());
        }
        fnv1a64(&bytes)
    }
}

/// 64-bit FNV-1a over a byte string.
fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Critical scaling index `(gamma d - 2) / (1 + gamma)`; only defined in the
/// supercritical regime `d * gamma > 2` (the boundary value is reported in
/// the rejection message for diagnostics).
pub fn critical_index(gamma: f64, d: usize) -> Result<f64> {
    if !gamma.is_finite() || gamma <= 0.0 || gamma >= 1.0 {
        return Err(Error::invalid("gamma must lie in (0, 1)"));
    }
    if d == 0 {
        return Err(Error::invalid("dimension must be positive"));
    }
    let value = (gamma * d as f64 - 2.0) / (1.0 + gamma);
    if gamma * d as f64 <= 2.0 {
        return Err(Error::invalid(format!(
            "subcritical: d * gamma = {} <= 2 (index value would be {value})",
            gamma * d as f64
        )));
    }
    Ok(value)
}

/// Variance scaling index `((2 gamma - 1) d - 2 gamma) / (2 gamma)`, defined
/// only for `gamma > 1/2` with `d > 2 gamma / (2 gamma - 1)`; `None`
/// otherwise (negative thresholds are gating outcomes, not errors). When
/// defined it always sits strictly below the critical index.
pub fn variance_index(gamma: f64, d: usize) -> Option<f64> {
    if !gamma.is_finite() || gamma <= 0.5 || gamma >= 1.0 {
        return None;
    }
    let value = ((2.0 * gamma - 1.0) * d as f64 - 2.0 * gamma) / (2.0 * gamma);
    if value <= 0.0 {
        return None;
    }
    Some(value)
}

// ---------------------------------------------------------------------------
// space-time fields
// ---------------------------------------------------------------------------

/// Which quantity a recorded field holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    /// Plain heat flow of the scaled initial condition.
    HeatFlow,
    /// Solution of the nonlinear scaled equation.
    ScaledSolution,
    /// Exponential linearization; pointwise lower bracket.
    LowerBracket,
    /// Source-form linearization; pointwise upper bracket.
    UpperBracket,
    /// Limiting mild solution with the `(1+gamma)`-power source.
    LimitMild,
}

impl FieldKind {
    fn tag(self) -> u8 {
        match self {
            FieldKind::HeatFlow => 0,
            FieldKind::ScaledSolution => 1,
            FieldKind::LowerBracket => 2,
            FieldKind::UpperBracket => 3,
            FieldKind::LimitMild => 4,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => FieldKind::HeatFlow,
            1 => FieldKind::ScaledSolution,
            2 => FieldKind::LowerBracket,
            3 => FieldKind::UpperBracket,
            4 => FieldKind::LimitMild,
            other => return Err(Error::Format(format!("unknown field kind tag {other}"))),
        })
    }
}

/// A quantity recorded on (time levels × spatial lattice), level-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeField {
    pub kind: FieldKind,
    /// Hash of the producing configuration, for provenance checks.
    pub config_hash: u64,
    pub grid: TorusGrid,
    /// Recorded times, ascending, starting at 0.
    pub times: Vec<f64>,
    /// `times.len() * grid.len()` values.
    pub values: Vec<f64>,
}

impl SpaceTimeField {
    /// Number of recorded time levels.
    pub fn level_count(&self) -> usize {
        self.times.len()
    }

    /// Spatial slice at level `i`.
    pub fn snapshot(&self, i: usize) -> &[f64] {
        let cells = self.grid.len();
        &self.values[i * cells..(i + 1) * cells]
    }

    /// Spatial slice at the final recorded time.
    pub fn final_snapshot(&self) -> &[f64] {
        self.snapshot(self.level_count() - 1)
    }

    /// Smallest recorded value across all levels.
    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Largest recorded value across all levels.
    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// One level as CSV with cell-centre coordinates: header
    /// `x0,..,x{d-1},value`, one row per cell in grid order.
    pub fn csv_slice(&self, level: usize) -> Result<String> {
        if level >= self.level_count() {
            return Err(Error::invalid(format!(
                "level {level} out of range 0..{}",
                self.level_count()
            )));
        }
        use std::fmt::Write as _;
        let d = self.grid.d;
        let mut out = String::new();
        for a in 0..d {
            let _ = write!(out, "x{a},");
        }
        out.push_str("value\n");
        let mut x = vec![0.0; d];
        for (idx, v) in self.snapshot(level).iter().enumerate() {
            self.grid.center(idx, &mut x);
            for xa in &x {
                let _ = write!(out, "{xa},");
            }
            let _ = writeln!(out, "{v}");
        }
        Ok(out)
    }

    /// Little-endian binary snapshot: magic, version, kind tag, grid shape,
    /// config hash, recorded times, then all values level-major.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(FIELD_MAGIC)?;
        f.write_all(&FIELD_FORMAT_VERSION.to_le_bytes())?;
        f.write_all(&[self.kind.tag()])?;
        f.write_all(&(self.grid.d as u32).to_le_bytes())?;
        f.write_all(&(self.grid.n as u32).to_le_bytes())?;
        f.write_all(&self.grid.side.to_le_bytes())?;
        f.write_all(&self.config_hash.to_le_bytes())?;
        f.write_all(&(self.times.len() as u32).to_le_bytes())?;
        for t in &self.times {
            f.write_all(&t.to_le_bytes())?;
        }
        for v in &self.values {
            f.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != FIELD_MAGIC {
            return Err(Error::Format("not a field snapshot file (bad magic)".into()));
        }
        let version = read_u32(&mut f)?;
        if version != FIELD_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported field format version {version} (expected {FIELD_FORMAT_VERSION})"
            )));
        }
        let mut tag = [0u8; 1];
        f.read_exact(&mut tag)?;
        let kind = FieldKind::from_tag(tag[0])?;
        let d = read_u32(&mut f)? as usize;
        let n = read_u32(&mut f)? as usize;
        let side = read_f64(&mut f)?;
        let grid = TorusGrid::new(d, n, side)
            .map_err(|e| Error::Format(format!("corrupt grid header: {e}")))?;
        let config_hash = read_u64(&mut f)?;
        let levels = read_u32(&mut f)? as usize;
        if levels == 0 || (levels as u128) * (grid.len() as u128) > MAX_FIELD_VALUES {
            return Err(Error::Format(format!("implausible level count {levels}")));
        }
        let mut times = vec![0.0; levels];
        for t in times.iter_mut() {
            *t = read_f64(&mut f)?;
        }
        if times.iter().any(|t| !t.is_finite()) || times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Format("corrupt time grid".into()));
        }
        let mut values = vec![0.0; levels * grid.len()];
        for v in values.iter_mut() {
            *v = read_f64(&mut f)?;
        }
        Ok(SpaceTimeField {
            kind,
            config_hash,
            grid,
            times,
            values,
        })
    }
}

const FIELD_MAGIC: &[u8; 4] = b"SLFD";
const FIELD_FORMAT_VERSION: u32 = 1;

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

// ---------------------------------------------------------------------------
// solver plumbing
// ---------------------------------------------------------------------------

struct SolveSetup {
    grid: TorusGrid,
    /// Scaled initial condition `k^kappa · phi` on the grid.
    u0: Vec<f64>,
    /// Reaction coefficient `k^{2-d} rho · medium` per cell.
    a: Vec<f64>,
    dt: f64,
    stride: usize,
}

fn prepare_solve(
    config: &ScalingConfig,
    medium: &MediumRaster,
    phi: &TestFunction,
) -> Result<SolveSetup> {
    config.validate()?;
    let grid = config.grid()?;
    if medium.grid != grid {
        return Err(Error::invalid(
            "medium raster grid does not match the solve configuration",
        ));
    }
    // The raster must resolve the medium's smoothing radius 1/k.
    if grid.spacing() > 1.0 / (4.0 * config.k) * (1.0 + 1e-9) {
        return Err(Error::invalid(format!(
            "grid spacing {} is coarser than a quarter of the smoothing \
             radius 1/k = {}; raise the resolution",
            grid.spacing(),
            1.0 / config.k
        )));
    }
    if medium.values.len() != grid.len() {
        return Err(Error::invalid("medium raster length mismatch"));
    }
    if medium.values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::invalid("medium raster must be finite and >= 0"));
    }
    let u0 = sampled_initial(config, &grid, phi)?;
    let rs = config.reaction_scale();
    let a: Vec<f64> = medium.values.iter().map(|g| rs * g).collect();
    let dt = config.t / config.time_steps as f64;
    let a_max = a.iter().copied().fold(0.0f64, f64::max);
    let u_max = u0.iter().copied().fold(0.0f64, f64::max);
    if dt * a_max * u_max > MAX_REACTION_STEP {
        return Err(Error::invalid(format!(
            "time step does not resolve the reaction: dt * max(a) * max(u0) \
             = {:.3e} > {MAX_REACTION_STEP}; use at least {} steps",
            dt * a_max * u_max,
            (config.t * a_max * u_max / MAX_REACTION_STEP).ceil()
        )));
    }
    Ok(SolveSetup {
        grid,
        u0,
        a,
        dt,
        stride: config.time_steps / config.snapshots,
    })
}

fn sampled_initial(
    config: &ScalingConfig,
    grid: &TorusGrid,
    phi: &TestFunction,
) -> Result<Vec<f64>> {
    if phi.dim() != config.d {
        return Err(Error::invalid(format!(
            "test function dimension {} does not match solve dimension {}",
            phi.dim(),
            config.d
        )));
    }
    phi.validate()?;
    let scale = config.initial_scale();
    let field = grid.sample(&mut |x| scale * phi.eval(x));
    if field.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::invalid(
            "initial condition must be non-negative on the grid",
        ));
    }
    Ok(field)
}

/// Records levels `0, stride, 2·stride, …, steps` of a solve.
struct Recorder {
    times: Vec<f64>,
    values: Vec<f64>,
    stride: usize,
    dt: f64,
    horizon: f64,
    steps: usize,
}

impl Recorder {
    fn new(setup: &SolveSetup, config: &ScalingConfig) -> Self {
        Recorder {
            times: Vec::with_capacity(config.snapshots + 1),
            values: Vec::with_capacity((config.snapshots + 1) * setup.grid.len()),
            stride: setup.stride,
            dt: setup.dt,
            horizon: config.t,
            steps: config.time_steps,
        }
    }

    fn record(&mut self, step: usize, field: &[f64]) {
        if step % self.stride != 0 {
            return;
        }
        let t = if step == self.steps {
            self.horizon
        } else {
            step as f64 * self.dt
        };
        self.times.push(t);
        self.values.extend_from_slice(field);
    }

    fn finish(self, kind: FieldKind, grid: TorusGrid, config_hash: u64) -> SpaceTimeField {
        SpaceTimeField {
            kind,
            config_hash,
            grid,
            times: self.times,
            values: self.values,
        }
    }
}

// ---------------------------------------------------------------------------
// solvers
// ---------------------------------------------------------------------------

/// Heat flow of the scaled initial condition (no reaction): the reference
/// field every bracket is measured against.
pub fn heat_flow(config: &ScalingConfig, phi: &TestFunction) -> Result<SpaceTimeField> {
    config.validate()?;
    let grid = config.grid()?;
    let mut g = sampled_initial(config, &grid, phi)?;
    let dt = config.t / config.time_steps as f64;
    let stride = config.time_steps / config.snapshots;
    let mut heat = HeatOperator::new(grid.clone());
    let mut rec = Recorder {
        times: Vec::with_capacity(config.snapshots + 1),
        values: Vec::with_capacity((config.snapshots + 1) * grid.len()),
        stride,
        dt,
        horizon: config.t,
        steps: config.time_steps,
    };
    rec.record(0, &g);
    for step in 1..=config.time_steps {
        heat.apply(&mut g, dt);
        rec.record(step, &g);
    }
    Ok(rec.finish(FieldKind::HeatFlow, grid, config.content_hash()))
}

/// Solves the nonlinear scaled equation `∂_t u = ½Δu − a u²` with
/// `u(0) = k^kappa phi` by Strang splitting: exact spectral heat half-step,
/// exact pointwise reaction step `u ← u / (1 + a Δt u)`, heat half-step.
/// Non-negativity and pointwise domination by the heat flow hold by
/// construction.
pub fn solve_scaled_loglaplace(
    config: &ScalingConfig,
    medium: &MediumRaster,
    phi: &TestFunction,
) -> Result<SpaceTimeField> {
    let setup = prepare_solve(config, medium, phi)?;
    let mut u = setup.u0.clone();
    let mut heat = HeatOperator::new(setup.grid.clone());
    let mut rec = Recorder::new(&setup, config);
    rec.record(0, &u);
    let half = 0.5 * setup.dt;
    for step in 1..=config.time_steps {
        heat.apply(&mut u, half);
        for (ui, ai) in u.iter_mut().zip(&setup.a) {
            *ui /= 1.0 + setup.dt * *ai * *ui;
        }
        heat.apply(&mut u, half);
        rec.record(step, &u);
    }
    Ok(rec.finish(
        FieldKind::ScaledSolution,
        setup.grid,
        config.content_hash(),
    ))
}

/// Solves the two linearizations bracketing the nonlinear solution.
///
/// The lower field obeys `∂_t w = ½Δw − a · (heat flow) · w`: Strang
/// splitting with the exact pointwise factor `exp(−Δt a g)`, the frozen
/// coefficient `g` taken at the half-step level (midpoint rule). The upper
/// field obeys `∂_t m = ½Δm − a w²` and is integrated in deficit form
/// `m = heat flow − D` with `∂_t D = ½Δ D + a w²` and the source evaluated
/// at the step midpoint, which keeps `m ≥` the nonlinear solution exactly:
/// the discrete source `a w̃²` never exceeds the nonlinear step's loss
/// `a u²/(1 + Δt a u)` when `w ≤ u`, by `e^{-x} ≤ 1/(1+x)`.
///
/// Returns `(lower, upper)`.
pub fn solve_linearized(
    config: &ScalingConfig,
    medium: &MediumRaster,
    phi: &TestFunction,
) -> Result<(SpaceTimeField, SpaceTimeField)> {
    let setup = prepare_solve(config, medium, phi)?;
    let cells = setup.grid.len();
    let mut g = setup.u0.clone();
    let mut w = setup.u0.clone();
    let mut deficit = vec![0.0; cells];
    let mut source = vec![0.0; cells];
    let mut heat = HeatOperator::new(setup.grid.clone());
    let mut rec_w = Recorder::new(&setup, config);
    let mut rec_m = Recorder::new(&setup, config);
    rec_w.record(0, &w);
    rec_m.record(0, &g); // m(0) = heat flow(0) = u0, deficit starts at zero
    let dt = setup.dt;
    let half = 0.5 * dt;
    let mut m_scratch = vec![0.0; cells];
    for step in 1..=config.time_steps {
        heat.apply(&mut g, half); // g at the half-step level
        heat.apply(&mut w, half);
        for i in 0..cells {
            let factor_half = (-0.5 * dt * setup.a[i] * g[i]).exp();
            w[i] *= factor_half; // midpoint value of w
            source[i] = setup.a[i] * w[i] * w[i];
            w[i] *= factor_half; // completes the full reaction factor
        }
        heat.apply(&mut w, half);
        heat.apply(&mut deficit, dt);
        heat.apply(&mut source, half);
        for (di, si) in deficit.iter_mut().zip(&source) {
            *di += dt * *si;
        }
        heat.apply(&mut g, half); // g at the full level
        if step % setup.stride == 0 {
            for i in 0..cells {
                // the max guards nothing but roundoff: the deficit cannot
                // analytically exceed the heat flow
                m_scratch[i] = (g[i] - deficit[i]).max(0.0);
            }
            rec_w.record(step, &w);
            rec_m.record(step, &m_scratch);
        }
    }
    let hash = config.content_hash();
    Ok((
        rec_w.finish(FieldKind::LowerBracket, setup.grid.clone(), hash),
        rec_m.finish(FieldKind::UpperBracket, setup.grid, hash),
    ))
}

// ---------------------------------------------------------------------------
// limiting mild solution and the multi-time functional
// ---------------------------------------------------------------------------

/// Limiting mild solution
/// `v(t, x) = c ∫_0^t S_r ((S_{t-r} phi)^{1+gamma})(x) dr`, evaluated by
/// composite Simpson over `r` with `nodes` panels and recorded at `levels`
/// uniform time levels plus the initial zero level. Equivalently the mild
/// solution of `∂_t v = ½Δv + c (S_t phi)^{1+gamma}`, `v(0) = 0`.
pub fn solve_limit_mild(
    c: f64,
    phi: &TestFunction,
    t: f64,
    gamma: f64,
    grid: &TorusGrid,
    levels: usize,
    nodes: usize,
) -> Result<SpaceTimeField> {
    if !c.is_finite() || c < 0.0 {
        return Err(Error::invalid("source constant c must be finite and >= 0"));
    }
    if !gamma.is_finite() || gamma <= 0.0 || gamma >= 1.0 {
        return Err(Error::invalid("gamma must lie in (0, 1)"));
    }
    if !t.is_finite() || t <= 0.0 {
        return Err(Error::invalid("horizon must be finite and > 0"));
    }
    if levels == 0 {
        return Err(Error::invalid("need at least one recorded level"));
    }
    if nodes < 2 || nodes % 2 != 0 {
        return Err(Error::invalid("Simpson node count must be even and >= 2"));
    }
    let base = non_negative_sample(grid, phi)?;
    if (levels as u128 + 1) * grid.len() as u128 > MAX_FIELD_VALUES {
        return Err(Error::ResourceLimit(
            "recorded levels exceed the field storage budget".into(),
        ));
    }
    let mut heat = HeatOperator::new(grid.clone());
    let cells = grid.len();
    let mut times = Vec::with_capacity(levels + 1);
    let mut values = Vec::with_capacity((levels + 1) * cells);
    times.push(0.0);
    values.extend(std::iter::repeat_n(0.0, cells));
    for level in 1..=levels {
        let tm = t * level as f64 / levels as f64;
        let slice = mild_source_integral(&base, tm, gamma, &mut heat, nodes, &[], 0.0)?;
        times.push(tm);
        values.extend(slice.into_iter().map(|v| c * v));
    }
    let mut hash_bytes = Vec::new();
    for v in [c, t, gamma, grid.side] {
        hash_bytes.extend_from_slice(&v.to_le_bytes());
    }
    for v in [grid.d, grid.n, levels, nodes] {
        hash_bytes.extend_from_slice(&(v as u64).to_le_bytes());
    }
    Ok(SpaceTimeField {
        kind: FieldKind::LimitMild,
        config_hash: fnv1a64(&hash_bytes),
        grid: grid.clone(),
        times,
        values,
    })
}

fn non_negative_sample(grid: &TorusGrid, phi: &TestFunction) -> Result<Vec<f64>> {
    if phi.dim() != grid.d {
        return Err(Error::invalid(
            "test function dimension does not match the grid",
        ));
    }
    phi.validate()?;
    let field = grid.sample(&mut |x| phi.eval(x));
    if field.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::invalid(
            "the source test function must be non-negative on the grid",
        ));
    }
    Ok(field)
}

/// Simpson quadrature of `∫_{lo}^{tm} S_r ((base_{tm-r} + extra_r)^{1+gamma}) dr`
/// where `base_{τ}` is the heat flow of `base` for time `τ` and `extra_r`
/// adds the flows of `later` terms `(t_j, phi_j sample)` for time `t_j - r`.
/// The plain mild solution passes no extras and `lo = 0`.
fn mild_source_integral(
    base: &[f64],
    tm: f64,
    gamma: f64,
    heat: &mut HeatOperator,
    nodes: usize,
    later: &[(f64, Vec<f64>)],
    lo: f64,
) -> Result<Vec<f64>> {
    let cells = base.len();
    let width = tm - lo;
    let h = width / nodes as f64;
    let mut acc = vec![0.0; cells];
    let mut work = vec![0.0; cells];
    let mut term = vec![0.0; cells];
    for j in 0..=nodes {
        let r = lo + h * j as f64;
        work.copy_from_slice(base);
        heat.apply(&mut work, (tm - r).max(0.0));
        for (tj, phij) in later {
            term.copy_from_slice(phij);
            heat.apply(&mut term, (tj - r).max(0.0));
            for (wv, tv) in work.iter_mut().zip(&term) {
                *wv += *tv;
            }
        }
        for v in work.iter_mut() {
            // spectral roundoff can leave ~1e-16 negatives in deep tails;
            // the analytic field is non-negative, and a fractional power of
            // a negative is NaN, so clamp before raising
            *v = v.max(0.0).powf(1.0 + gamma);
        }
        heat.apply(&mut work, r);
        let weight = h / 3.0
            * if j == 0 || j == nodes {
                1.0
            } else if j % 2 == 1 {
                4.0
            } else {
                2.0
            };
        for (av, wv) in acc.iter_mut().zip(&work) {
            *av += weight * *wv;
        }
    }
    Ok(acc)
}

/// Pairs a grid field with a measure: integrates the nearest-cell lookup of
/// `field` against `mu` (continuous parts at the given quadrature
/// resolution). Points outside the box wrap periodically.
pub fn pair_with_measure(
    grid: &TorusGrid,
    field: &[f64],
    mu: &MeasureSpec,
    resolution: usize,
) -> Result<f64> {
    if field.len() != grid.len() {
        return Err(Error::invalid("field length does not match the grid"));
    }
    mu.validate()?;
    if mu.dim() != grid.d {
        return Err(Error::invalid("measure dimension does not match the grid"));
    }
    if resolution == 0 {
        return Err(Error::invalid("pairing resolution must be >= 1"));
    }
    let n = grid.n;
    let h = grid.spacing();
    let side = grid.side;
    let d = grid.d;
    Ok(mu.integrate(
        &mut |x: &[f64]| {
            let mut flat = 0usize;
            for a in 0..d {
                let u = x[a].rem_euclid(side);
                let mut i = (u / h) as usize;
                if i >= n {
                    i = n - 1;
                }
                flat = flat * n + i;
            }
            field[flat]
        },
        resolution,
    ))
}

/// The multi-time functional
/// `c ⟨mu, Σ_i ∫_{t_{i-1}}^{t_i} S_r ((Σ_{j≥i} S_{t_j-r} phi_j)^{1+gamma}) dr⟩`
/// with `t_0 = 0`, for a sorted schedule of (time, test function) pairs.
/// Empty intervals contribute nothing, so coincident times merge their test
/// functions exactly as the formula dictates; an empty schedule gives 0.
pub fn fluctuation_functional(
    mu: &MeasureSpec,
    schedule: &[(f64, TestFunction)],
    c: f64,
    gamma: f64,
    grid: &TorusGrid,
    nodes: usize,
    resolution: usize,
) -> Result<f64> {
    if !c.is_finite() {
        return Err(Error::invalid("functional constant c must be finite"));
    }
    if !gamma.is_finite() || gamma <= 0.0 || gamma >= 1.0 {
        return Err(Error::invalid("gamma must lie in (0, 1)"));
    }
    if nodes < 2 || nodes % 2 != 0 {
        return Err(Error::invalid("Simpson node count must be even and >= 2"));
    }
    mu.validate()?;
    if mu.dim() != grid.d {
        return Err(Error::invalid("measure dimension does not match the grid"));
    }
    for pair in schedule.windows(2) {
        if pair[1].0 < pair[0].0 {
            return Err(Error::invalid("schedule times must be sorted ascending"));
        }
    }
    if schedule
        .iter()
        .any(|(t, _)| !t.is_finite() || *t < 0.0)
    {
        return Err(Error::invalid("schedule times must be finite and >= 0"));
    }
    if schedule.is_empty() {
        return Ok(0.0);
    }
    let samples: Vec<(f64, Vec<f64>)> = schedule
        .iter()
        .map(|(t, phi)| Ok((*t, non_negative_sample(grid, phi)?)))
        .collect::<Result<_>>()?;
    let cells = grid.len();
    let mut heat = HeatOperator::new(grid.clone());
    let mut total = vec![0.0; cells];
    let mut prev = 0.0;
    for i in 0..samples.len() {
        let ti = samples[i].0;
        if ti > prev {
            let slice = mild_source_integral(
                &samples[i].1,
                ti,
                gamma,
                &mut heat,
                nodes,
                &samples[i + 1..],
                prev,
            )?;
            for (tv, sv) in total.iter_mut().zip(&slice) {
                *tv += *sv;
            }
        }
        prev = ti;
    }
    Ok(c * pair_with_measure(grid, &total, mu, resolution)?)
}
