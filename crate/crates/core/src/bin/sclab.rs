//! Command-line driver. Every subcommand loads one JSON experiment
//! configuration, optionally overrides its seed and output directory, runs
//! the corresponding operation, and writes CSV and JSON artifacts plus an
//! echo of the effective configuration into the output directory. Artifacts
//! contain no clocks or host details, so the same configuration and seed
//! reproduce them byte for byte; `SCLAB_WORKERS` caps the worker threads
//! without changing any number.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use sclab::constants::estimate_limit_constants;
use sclab::harness::{
    evaluate_multitime_bounds, load_config, quenched_variance, run_fluctuation_sweep, run_lln,
    save_config, transport_medium, worker_count_from_env, ExperimentConfig, SCHEMA_VERSION,
};
use sclab::medium::{sample_stable_measure, Boundary, MediumField};
use sclab::pde::{pair_with_measure, solve_scaled_loglaplace, variance_index};
use sclab::quad::BallRule;
use sclab::reactant::{laplace_functional_mc, Catalyst};
use sclab::rng::derive_seed;
use sclab::{Error, Result};

/// Simpson intervals for the transported-variance scan and the moment bounds.
const CLI_NODES: usize = 16;

/// Pairing resolution for the bounds and the reactant target.
const CLI_RESOLUTION: usize = 32;

#[derive(Parser)]
#[command(
    name = "sclab",
    version,
    about = "Scaled experiments for branching mass in a heavy-tailed random medium"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scale sweep of the linearised bracket gaps at the critical exponent.
    Sweep(RunArgs),
    /// Law-of-large-numbers decay scan at the configured subcritical exponent.
    Lln(RunArgs),
    /// Quenched variance of one transported medium across the scale grid.
    Variance(RunArgs),
    /// Exponential moment bounds for the configured observation schedule.
    Bounds(RunArgs),
    /// Monte Carlo limit constants at the configured budgets.
    Constants(RunArgs),
    /// Sample one medium and persist it with its atom table.
    Medium(RunArgs),
    /// Branching-particle check against the nonlinear grid solver.
    Reactant(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Path to the JSON experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: the configuration's out_dir, then "out").
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    if let Some(n) = worker_count_from_env() {
        // Ignore the error if a pool already exists; the override is a cap,
        // not a correctness knob.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Sweep(a) => with_setup(a, cmd_sweep),
        Command::Lln(a) => with_setup(a, cmd_lln),
        Command::Variance(a) => with_setup(a, cmd_variance),
        Command::Bounds(a) => with_setup(a, cmd_bounds),
        Command::Constants(a) => with_setup(a, cmd_constants),
        Command::Medium(a) => with_setup(a, cmd_medium),
        Command::Reactant(a) => with_setup(a, cmd_reactant),
    }
}

/// Loads the configuration, applies the overrides, prepares the output
/// directory, echoes the effective configuration into it, and hands off.
fn with_setup(args: RunArgs, f: fn(&ExperimentConfig, &Path) -> Result<()>) -> Result<()> {
    let mut config = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let out = args
        .out
        .or_else(|| config.out_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&out)?;
    save_config(&out.join("config.json"), &config)?;
    f(&config, &out)
}

fn write_artifact(out: &Path, name: &str, body: &str) -> Result<()> {
    let path = out.join(name);
    std::fs::write(&path, body)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_sweep(config: &ExperimentConfig, out: &Path) -> Result<()> {
    let report = run_fluctuation_sweep(config)?;
    println!(
        "sweep at kappa = {:.6}: upper target {:.6}, lower target {:.6}",
        report.kappa, report.upper_target, report.lower_target
    );
    for r in &report.rows {
        println!(
            "  k = {:>5}: w gap {:.6} (var {:.3e}), m gap {:.6} (var {:.3e}), \
             media {}, bracket {}",
            r.k, r.w_gap_mean, r.w_gap_var, r.m_gap_mean, r.m_gap_var, r.media, r.bracket_ok
        );
    }
    println!(
        "trends: upper {}, lower {}, variance {}",
        report.upper_trend_ok, report.lower_trend_ok, report.variance_trend_ok
    );
    write_artifact(out, "sweep.csv", &report.csv())?;
    write_artifact(out, "sweep_summary.json", &report.summary_json()?)
}

fn cmd_lln(config: &ExperimentConfig, out: &Path) -> Result<()> {
    let report = run_lln(config)?;
    println!(
        "decay scan at kappa = {} (critical {:.6}): expected slope {:.4}, \
         fitted {}, decreasing {}",
        report.kappa,
        report.kappa_c,
        report.expected_slope,
        report
            .slope
            .map_or("n/a".to_string(), |s| format!("{s:.4}")),
        report.decreasing
    );
    for r in &report.rows {
        println!("  k = {:>5}: statistic {:.6e}", r.k, r.statistic);
    }
    write_artifact(out, "lln.csv", &report.csv())?;
    write_artifact(out, "lln_summary.json", &report.summary_json()?)
}

#[derive(Serialize)]
struct VarianceRow {
    k: f64,
    variance: f64,
}

#[derive(Serialize)]
struct VarianceSummary {
    schema_version: u32,
    code_version: String,
    config_hash: u64,
    seed: u64,
    kappa: f64,
    variance_index: Option<f64>,
    base_atoms: usize,
    rows: Vec<VarianceRow>,
}

fn cmd_variance(config: &ExperimentConfig, out: &Path) -> Result<()> {
    config.validate()?;
    let s = &config.scaling;
    let base = sample_stable_measure(&config.sample_config(1.0)?, derive_seed(config.seed, 0))?;
    let ball = BallRule::new(s.d, 1.0, 4);
    let mut rows = Vec::new();
    for &k in &config.k_grid {
        let medium = transport_medium(&base, k)?;
        let v = quenched_variance(
            &medium, &config.phi, s.t, k, s.kappa, s.rho, CLI_NODES, &ball,
        )?;
        println!("  k = {:>5}: quenched variance {v:.6e}", k);
        rows.push(VarianceRow { k, variance: v });
    }
    let summary = VarianceSummary {
        schema_version: SCHEMA_VERSION,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: config.content_hash(),
        seed: config.seed,
        kappa: s.kappa,
        variance_index: variance_index(s.gamma, s.d),
        base_atoms: base.atom_count(),
        rows,
    };
    if let Some(idx) = summary.variance_index {
        println!(
            "variance index {idx:.4}: kappa {} sits {}",
            s.kappa,
            if s.kappa > idx { "above (growth)" } else { "below (decay)" }
        );
    }
    let mut csv = String::from("k,variance\n");
    for r in &summary.rows {
        csv.push_str(&format!("{},{}\n", r.k, r.variance));
    }
    write_artifact(out, "variance.csv", &csv)?;
    let mut body = serde_json::to_string_pretty(&summary)?;
    body.push('\n');
    write_artifact(out, "variance_summary.json", &body)
}

#[derive(Serialize)]
struct BoundsSummary {
    schema_version: u32,
    code_version: String,
    config_hash: u64,
    seed: u64,
    gamma: f64,
    schedule_len: usize,
    c_bar: f64,
    c_under: f64,
    upper: f64,
    lower: f64,
}

fn cmd_bounds(config: &ExperimentConfig, out: &Path) -> Result<()> {
    config.validate()?;
    let s = &config.scaling;
    let b = &config.budgets;
    let constants = estimate_limit_constants(
        s.d,
        s.gamma,
        s.rho,
        b.constant_paths,
        b.constant_horizon,
        b.occupation_delta,
        derive_seed(config.seed, 0),
    )?;
    let grid = s.grid()?;
    let (upper, lower) = evaluate_multitime_bounds(
        &config.mu,
        &config.schedule,
        s.gamma,
        &constants,
        &grid,
        CLI_NODES,
        CLI_RESOLUTION,
    )?;
    println!(
        "moment bounds over {} observation times: upper {upper:.8}, lower {lower:.8}",
        config.schedule.len()
    );
    let summary = BoundsSummary {
        schema_version: SCHEMA_VERSION,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: config.content_hash(),
        seed: config.seed,
        gamma: s.gamma,
        schedule_len: config.schedule.len(),
        c_bar: constants.c_bar.estimate.value,
        c_under: constants.c_under.estimate.value,
        upper,
        lower,
    };
    let csv = format!(
        "upper,lower,c_bar,c_under,schedule_len\n{},{},{},{},{}\n",
        upper, lower, summary.c_bar, summary.c_under, summary.schedule_len
    );
    write_artifact(out, "bounds.csv", &csv)?;
    let mut body = serde_json::to_string_pretty(&summary)?;
    body.push('\n');
    write_artifact(out, "bounds_summary.json", &body)
}

fn cmd_constants(config: &ExperimentConfig, out: &Path) -> Result<()> {
    config.validate()?;
    let s = &config.scaling;
    let b = &config.budgets;
    let constants = estimate_limit_constants(
        s.d,
        s.gamma,
        s.rho,
        b.constant_paths,
        b.constant_horizon,
        b.occupation_delta,
        derive_seed(config.seed, 0),
    )?;
    println!(
        "c_bar = {:.6} ± {:.6}, c_under = {:.6} ± {:.6}, separation {:.1} standard errors",
        constants.c_bar.estimate.value,
        constants.c_bar.estimate.std_error,
        constants.c_under.estimate.value,
        constants.c_under.estimate.std_error,
        constants.separation_z()
    );
    write_artifact(out, "constants.csv", &constants.csv_table())?;
    let mut body = serde_json::to_string_pretty(&constants)?;
    body.push('\n');
    write_artifact(out, "constants_summary.json", &body)
}

#[derive(Serialize)]
struct MediumSummary {
    schema_version: u32,
    code_version: String,
    config_hash: u64,
    seed: u64,
    gamma: f64,
    eps_min: f64,
    window_volume: f64,
    atom_count: usize,
    expected_atom_count: f64,
    total_weight: f64,
    max_weight: f64,
    truncation_bias_bound: f64,
}

fn cmd_medium(config: &ExperimentConfig, out: &Path) -> Result<()> {
    config.validate()?;
    let s = &config.scaling;
    let sc = config.sample_config(s.k)?;
    let vol = sc.window.volume();
    let sample = sample_stable_measure(&sc, config.seed)?;
    let d = s.d;
    let mut csv = String::new();
    for a in 0..d {
        csv.push_str(&format!("x{a},"));
    }
    csv.push_str("weight\n");
    for j in 0..sample.atom_count() {
        for v in sample.position(j) {
            csv.push_str(&format!("{v},"));
        }
        csv.push_str(&format!("{}\n", sample.weights[j]));
    }
    let summary = MediumSummary {
        schema_version: SCHEMA_VERSION,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: config.content_hash(),
        seed: config.seed,
        gamma: s.gamma,
        eps_min: config.medium.eps_min,
        window_volume: vol,
        atom_count: sample.atom_count(),
        expected_atom_count: sclab::medium::expected_atom_count(
            s.gamma,
            config.medium.eps_min,
            vol,
        ),
        total_weight: sample.weights.iter().sum(),
        max_weight: sample.weights.iter().copied().fold(0.0, f64::max),
        truncation_bias_bound: sclab::medium::truncation_bias_bound(
            s.gamma,
            config.medium.eps_min,
            vol,
        ),
    };
    println!(
        "sampled {} atoms (expected {:.1}) over volume {vol}",
        summary.atom_count, summary.expected_atom_count
    );
    sample.save(&out.join("medium.bin"))?;
    println!("wrote {}", out.join("medium.bin").display());
    write_artifact(out, "medium.csv", &csv)?;
    let mut body = serde_json::to_string_pretty(&summary)?;
    body.push('\n');
    write_artifact(out, "medium_summary.json", &body)
}

#[derive(Serialize)]
struct ReactantSummary {
    schema_version: u32,
    code_version: String,
    config_hash: u64,
    seed: u64,
    runs: u64,
    empirical: f64,
    std_error: f64,
    solver_target: f64,
    z: f64,
}

fn cmd_reactant(config: &ExperimentConfig, out: &Path) -> Result<()> {
    config.validate()?;
    let rc = config
        .reactant
        .clone()
        .ok_or_else(|| Error::invalid("the configuration has no reactant block"))?;
    let s = &config.scaling;
    if (rc.rho - s.rho).abs() > 1e-12 {
        return Err(Error::invalid(
            "the reactant rho must match the scaling rho for the solver comparison",
        ));
    }
    // The particle system runs unscaled, so the comparison pins k = 1 and a
    // unit mass exponent on the template grid.
    let mut cfg = s.clone();
    cfg.k = 1.0;
    cfg.kappa = 0.0;
    cfg.snapshots = 1;
    let sample = sample_stable_measure(&config.sample_config(1.0)?, derive_seed(config.seed, 0))?;
    let atoms = sample.atom_count();
    let mut field = MediumField::new(Arc::new(sample), 1.0, Boundary::Periodic)?;
    let grid = cfg.grid()?;
    let raster = field.rasterize(&grid)?.clone();
    let u = solve_scaled_loglaplace(&cfg, &raster, &config.phi)?;
    let pairing = pair_with_measure(&grid, u.final_snapshot(), &config.mu, CLI_RESOLUTION)?;
    let target = (-pairing).exp();
    let catalyst = Catalyst::Raster(raster);
    let est = laplace_functional_mc(
        &config.mu,
        &config.phi,
        cfg.t,
        &rc,
        &catalyst,
        config.budgets.reactant_runs,
        derive_seed(config.seed, 1),
    )?;
    let z = est.z_score(target);
    println!(
        "reactant check over {atoms} atoms: empirical {:.6} ± {:.6} vs solver {target:.6} \
         (z = {z:.2})",
        est.value, est.std_error
    );
    let summary = ReactantSummary {
        schema_version: SCHEMA_VERSION,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: config.content_hash(),
        seed: config.seed,
        runs: est.n,
        empirical: est.value,
        std_error: est.std_error,
        solver_target: target,
        z,
    };
    let csv = format!(
        "empirical,std_error,runs,solver_target,z\n{},{},{},{},{}\n",
        est.value, est.std_error, est.n, target, z
    );
    write_artifact(out, "reactant.csv", &csv)?;
    let mut body = serde_json::to_string_pretty(&summary)?;
    body.push('\n');
    write_artifact(out, "reactant_summary.json", &body)
}
