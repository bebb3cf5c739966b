//! Monte Carlo estimation of the two limit constants that bracket the
//! fluctuation functionals — an upper constant built from a single-path
//! occupation moment of power `gamma` and a lower constant built from a
//! two-path occupation moment of power `gamma - 1` — plus the closed-form
//! geometric constant `(d-2) π^{d/2} / Γ(d/2)` they share.
//!
//! Both estimators truncate the occupation integral at a finite horizon and
//! report the truncation honestly: the upper constant is biased *down* by
//! the cut (the integrand is non-negative and enters with a positive power)
//! with an analytic bound on the deficit; the lower constant is biased *up*
//! (negative power) and reports the observed shift between the half and full
//! horizon as its diagnostic, computed from common random numbers inside a
//! single run.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma as gamma_fn;

use crate::brownian::{occupation_checkpoint_samples, occupation_tail_bound};
use crate::error::{Error, Result};
use crate::estimator::EstimatorResult;
use crate::geom::MAX_DIM;

/// Largest tolerated ratio of the truncation diagnostic to the estimate;
/// beyond this the requested horizon is rejected as too small.
const MAX_RELATIVE_TRUNCATION: f64 = 0.1;

/// Geometric constant `(d-2) π^{d/2} / Γ(d/2)`: the compound of the sphere
/// area and the transient hitting rate that both limit constants carry.
pub fn c_ba1(d: usize) -> Result<f64> {
    if d < 3 {
        return Err(Error::invalid(
            "the hitting-rate constant needs a transient dimension d >= 3",
        ));
    }
    let half = d as f64 / 2.0;
    Ok((d as f64 - 2.0) * std::f64::consts::PI.powf(half) / gamma_fn(half))
}

/// Sign of the truncation bias a finite occupation horizon induces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasDirection {
    /// The truncated estimate undershoots the limit.
    Down,
    /// The truncated estimate overshoots the limit.
    Up,
}

impl std::fmt::Display for BiasDirection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BiasDirection::Down => "down",
            BiasDirection::Up => "up",
        })
    }
}

/// One limit-constant estimate with its horizon-truncation diagnostic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstantEstimate {
    pub estimate: EstimatorResult,
    /// Absolute truncation diagnostic in the units of the estimate: an
    /// analytic deficit bound for the down-biased constant, the observed
    /// half-to-full horizon shift for the up-biased one.
    pub truncation: f64,
    pub bias: BiasDirection,
    pub horizon: f64,
}

/// Prefactor of the upper constant: `rho^gamma · c_ba1(d)`.
pub fn cbar_prefactor(d: usize, gamma: f64, rho: f64) -> Result<f64> {
    Ok(rho.powf(gamma) * c_ba1(d)?)
}

/// Prefactor of the lower constant:
/// `gamma · rho^gamma · 2 π^{d/2} / (d Γ(d/2))` (the second factor is the
/// volume-to-area compound of the radius-2 ball pair geometry).
pub fn cunder_prefactor(d: usize, gamma: f64, rho: f64) -> Result<f64> {
    if d < 3 {
        return Err(Error::invalid(
            "the lower-constant prefactor needs a transient dimension d >= 3",
        ));
    }
    let half = d as f64 / 2.0;
    let geometry = 2.0 * std::f64::consts::PI.powf(half) / (d as f64 * gamma_fn(half));
    Ok(gamma * rho.powf(gamma) * geometry)
}

fn validate_common(d: usize, rho: f64, horizon: f64, paths: usize) -> Result<()> {
    if d < 3 || d > MAX_DIM {
        return Err(Error::invalid(format!(
            "limit-constant estimation supports d in 3..={MAX_DIM}"
        )));
    }
    if !rho.is_finite() || rho < 0.0 {
        return Err(Error::invalid("rho must be finite and >= 0"));
    }
    if !horizon.is_finite() || horizon <= 0.0 {
        return Err(Error::invalid("occupation horizon must be finite and > 0"));
    }
    if paths < 2 {
        return Err(Error::invalid("need at least 2 paths for a standard error"));
    }
    Ok(())
}

fn unit_sphere_start(d: usize) -> Vec<f64> {
    let mut x = vec![0.0; d];
    x[0] = 1.0;
    x
}

/// Estimates the upper limit constant
/// `rho^gamma · c_ba1(d) · E[(occupation of the unit ball over [0, horizon]
/// from a unit-sphere start)^gamma]`.
///
/// `gamma = 1` is accepted as a diagnostic mode (the mean occupation has an
/// independent Green-potential oracle) even though the model range is
/// `(0, 1)`. Truncating at `horizon` biases the estimate down; the reported
/// `truncation` bounds the deficit by combining, per path, the concavity
/// bound `gamma · occ^{gamma-1} · T` with the subadditivity bound `T^gamma`,
/// where `T` is the analytic mean tail occupation beyond the horizon. The
/// call is rejected when that bound exceeds 10% of the estimate.
pub fn estimate_cbar(
    d: usize,
    gamma: f64,
    rho: f64,
    paths: usize,
    horizon: f64,
    delta: f64,
    seed: u64,
) -> Result<ConstantEstimate> {
    if !gamma.is_finite() || gamma <= 0.0 || gamma > 1.0 {
        return Err(Error::invalid(
            "gamma must lie in (0, 1]; 1 is the diagnostic mode",
        ));
    }
    validate_common(d, rho, horizon, paths)?;
    if d as f64 * gamma <= 2.0 {
        return Err(Error::invalid(format!(
            "need d > 2/gamma for a finite constant; got d = {d}, gamma = {gamma}"
        )));
    }
    if rho == 0.0 {
        return Ok(ConstantEstimate {
            estimate: zero_estimate(paths, seed),
            truncation: 0.0,
            bias: BiasDirection::Down,
            horizon,
        });
    }
    let start = unit_sphere_start(d);
    let rows = occupation_checkpoint_samples(&start, 1.0, &[horizon], paths, delta, seed)?;
    let prefactor = cbar_prefactor(d, gamma, rho)?;
    let samples: Vec<f64> = rows.iter().map(|r| prefactor * r[0].powf(gamma)).collect();
    let estimate = EstimatorResult::from_samples(&samples, seed);
    let tail = occupation_tail_bound(d, 1.0, horizon)?;
    let deficit: f64 = rows
        .iter()
        .map(|r| {
            let occ = r[0].max(delta);
            (gamma * occ.powf(gamma - 1.0) * tail).min(tail.powf(gamma))
        })
        .sum::<f64>()
        / rows.len() as f64;
    let truncation = prefactor * deficit;
    if truncation > MAX_RELATIVE_TRUNCATION * estimate.value {
        return Err(Error::invalid(format!(
            "horizon {horizon} too small: truncation bound {truncation:.3e} \
             exceeds {MAX_RELATIVE_TRUNCATION:.0e}x the estimate {:.3e}",
            estimate.value
        )));
    }
    Ok(ConstantEstimate {
        estimate,
        truncation,
        bias: BiasDirection::Down,
        horizon,
    })
}

/// Estimates the lower limit constant
/// `gamma rho^gamma · (2 π^{d/2} / (d Γ(d/2))) · E[(occ_1 + occ_2)^{gamma-1}]`
/// over `paths` independent pairs of paths, both started at the origin, each
/// contributing its radius-2 ball occupation over `[0, horizon]`.
///
/// The exponent `gamma - 1 < 0` is safe: both paths start at the ball's
/// centre, so the very first trapezoid substep already contributes strictly
/// positive in-ball time; the pair sum is additionally floored at one full
/// substep `delta`. Truncation biases the estimate up; the reported
/// `truncation` is the observed shift from the half horizon to the full one
/// on the same paths, and the call is rejected when it exceeds 10% of the
/// estimate.
pub fn estimate_cunder(
    d: usize,
    gamma: f64,
    rho: f64,
    paths: usize,
    horizon: f64,
    delta: f64,
    seed: u64,
) -> Result<ConstantEstimate> {
    if !gamma.is_finite() || gamma <= 0.0 || gamma >= 1.0 {
        return Err(Error::invalid("gamma must lie in (0, 1)"));
    }
    validate_common(d, rho, horizon, paths)?;
    if d as f64 * gamma <= 2.0 {
        return Err(Error::invalid(format!(
            "need d > 2/gamma for a finite constant; got d = {d}, gamma = {gamma}"
        )));
    }
    if rho == 0.0 {
        return Ok(ConstantEstimate {
            estimate: zero_estimate(paths, seed),
            truncation: 0.0,
            bias: BiasDirection::Up,
            horizon,
        });
    }
    let origin = vec![0.0; d];
    let rows = occupation_checkpoint_samples(
        &origin,
        2.0,
        &[0.5 * horizon, horizon],
        2 * paths,
        delta,
        seed,
    )?;
    let prefactor = cunder_prefactor(d, gamma, rho)?;
    let pair_moment = |col: usize| -> Vec<f64> {
        (0..paths)
            .map(|i| {
                let sum = (rows[2 * i][col] + rows[2 * i + 1][col]).max(delta);
                prefactor * sum.powf(gamma - 1.0)
            })
            .collect()
    };
    let samples = pair_moment(1);
    let estimate = EstimatorResult::from_samples(&samples, seed);
    let half_value = pair_moment(0).iter().sum::<f64>() / paths as f64;
    // in-ball time only grows with the horizon, so the negative power can
    // only shrink: the shift is non-negative by construction
    let truncation = half_value - estimate.value;
    if truncation > MAX_RELATIVE_TRUNCATION * estimate.value {
        return Err(Error::invalid(format!(
            "horizon {horizon} too small: half-to-full horizon shift {truncation:.3e} \
             exceeds {MAX_RELATIVE_TRUNCATION:.0e}x the estimate {:.3e}",
            estimate.value
        )));
    }
    Ok(ConstantEstimate {
        estimate,
        truncation,
        bias: BiasDirection::Up,
        horizon,
    })
}

fn zero_estimate(paths: usize, seed: u64) -> EstimatorResult {
    EstimatorResult {
        value: 0.0,
        std_error: 0.0,
        n: paths as u64,
        seed,
        wall_time_secs: 0.0,
    }
}

/// Finite-horizon occupation moment
/// `E[(occupation of the unit ball over [0, m] from a unit-sphere start)^gamma]`
/// — the horizon-resolved factor of the upper constant, without prefactors.
pub fn c_replace2(
    m: f64,
    d: usize,
    gamma: f64,
    paths: usize,
    delta: f64,
    seed: u64,
) -> Result<EstimatorResult> {
    Ok(c_replace2_curve(&[m], d, gamma, paths, delta, seed)?.remove(0))
}

/// [`c_replace2`] evaluated at several horizons on the *same* paths (common
/// random numbers): the occupation rows are pathwise non-decreasing in the
/// horizon, so the returned estimates are monotone non-decreasing exactly,
/// not just statistically.
pub fn c_replace2_curve(
    ms: &[f64],
    d: usize,
    gamma: f64,
    paths: usize,
    delta: f64,
    seed: u64,
) -> Result<Vec<EstimatorResult>> {
    if !gamma.is_finite() || gamma <= 0.0 || gamma > 1.0 {
        return Err(Error::invalid(
            "gamma must lie in (0, 1]; 1 is the diagnostic mode",
        ));
    }
    if ms.is_empty() {
        return Err(Error::invalid("need at least one horizon"));
    }
    if ms.iter().any(|m| !m.is_finite() || *m <= 0.0) {
        return Err(Error::invalid("horizons must be finite and > 0"));
    }
    if ms.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("horizons must be strictly increasing"));
    }
    if paths < 2 {
        return Err(Error::invalid("need at least 2 paths for a standard error"));
    }
    let start = unit_sphere_start(d);
    let rows = occupation_checkpoint_samples(&start, 1.0, ms, paths, delta, seed)?;
    Ok((0..ms.len())
        .map(|col| {
            let samples: Vec<f64> = rows.iter().map(|r| r[col].powf(gamma)).collect();
            EstimatorResult::from_samples(&samples, seed)
        })
        .collect())
}

/// The bundle the CLI reports: both limit constants at a shared horizon,
/// the closed-form geometric constant, and the producing parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LimitConstants {
    pub c_bar: ConstantEstimate,
    pub c_under: ConstantEstimate,
    pub c_ba1: f64,
    pub d: usize,
    pub gamma: f64,
    pub rho: f64,
}

impl LimitConstants {
    /// Separation of the two estimates in combined standard errors.
    pub fn separation_z(&self) -> f64 {
        let se = (self.c_bar.estimate.std_error.powi(2)
            + self.c_under.estimate.std_error.powi(2))
        .sqrt();
        (self.c_bar.estimate.value - self.c_under.estimate.value) / se
    }

    /// CSV table `name,value,std_error,n,horizon,bias` with one row per
    /// constant (the closed-form one carries zero error and no bias).
    pub fn csv_table(&self) -> String {
        let mut out = String::from("name,value,std_error,n,horizon,bias\n");
        for (name, est) in [("c_bar", &self.c_bar), ("c_under", &self.c_under)] {
            out.push_str(&format!(
                "{name},{},{},{},{},{}\n",
                est.estimate.value, est.estimate.std_error, est.estimate.n, est.horizon, est.bias
            ));
        }
        out.push_str(&format!("c_ba1,{},0,0,0,exact\n", self.c_ba1));
        out
    }
}

/// Runs both limit-constant estimators on disjoint seed streams and bundles
/// the results. `paths` counts single paths for the upper constant and pairs
/// for the lower one.
pub fn estimate_limit_constants(
    d: usize,
    gamma: f64,
    rho: f64,
    paths: usize,
    horizon: f64,
    delta: f64,
    seed: u64,
) -> Result<LimitConstants> {
    let c_bar = estimate_cbar(d, gamma, rho, paths, horizon, delta, seed)?;
    let c_under = estimate_cunder(
        d,
        gamma,
        rho,
        paths,
        horizon,
        delta,
        seed ^ 0x9e37_79b9_7f4a_7c15,
    )?;
    Ok(LimitConstants {
        c_bar,
        c_under,
        c_ba1: c_ba1(d)?,
        d,
        gamma,
        rho,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    #[test]
    fn geometric_constant_closed_forms() {
        assert_relative_eq!(c_ba1(3).unwrap(), 2.0 * PI, max_relative = 1e-12);
        assert_relative_eq!(c_ba1(4).unwrap(), 2.0 * PI * PI, max_relative = 1e-12);
        assert_relative_eq!(c_ba1(5).unwrap(), 4.0 * PI * PI, max_relative = 1e-12);
        assert!(c_ba1(2).is_err());
    }

    #[test]
    fn lower_prefactor_closed_form() {
        // d = 3: 2 pi^{3/2} / (3 Gamma(3/2)) = 4 pi / 3, i.e. the geometric
        // factor 2 pi^{d/2} / (d Gamma(d/2)) is the unit-ball volume
        assert_relative_eq!(
            cunder_prefactor(3, 1.0, 1.0).unwrap(),
            4.0 * PI / 3.0,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            cunder_prefactor(3, 0.8, 2.0).unwrap(),
            0.8 * 2.0f64.powf(0.8) * 4.0 * PI / 3.0,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            cunder_prefactor(5, 1.0, 1.0).unwrap(),
            8.0 * PI * PI / 15.0,
            max_relative = 1e-12
        );
    }

    /// At power 1 the occupation factor is the mean occupation, which has an
    /// independent Green-potential value: from a unit-sphere start the
    /// radius-1 ball is occupied 2/3 on average, so the constant is
    /// `2 pi * 2/3 = 4 pi / 3` per unit rho.
    #[test]
    fn unit_power_diagnostic_matches_green_potential() {
        let est = estimate_cbar(3, 1.0, 1.0, 4000, 25_600.0, 0.05, 4451).unwrap();
        let reference = 4.0 * PI / 3.0;
        let z = est.estimate.z_score(reference);
        assert!(
            z < 3.0,
            "estimate {} vs closed form {reference}: z = {z}",
            est.estimate.value
        );
        // the horizon cut explains part of any gap; its bound must be honest
        assert!(est.truncation > 0.0 && est.truncation < 0.1 * est.estimate.value);
        assert_eq!(est.bias, BiasDirection::Down);
    }

    #[test]
    fn zero_coupling_gives_zero_constants() {
        let bar = estimate_cbar(3, 0.8, 0.0, 100, 10.0, 0.05, 7).unwrap();
        assert_eq!(bar.estimate.value, 0.0);
        assert_eq!(bar.estimate.std_error, 0.0);
        let under = estimate_cunder(3, 0.8, 0.0, 100, 10.0, 0.05, 7).unwrap();
        assert_eq!(under.estimate.value, 0.0);
    }

    #[test]
    fn coupling_enters_as_an_exact_power_prefactor() {
        let (d, gamma, n, horizon, delta, seed) = (3, 0.8f64, 400, 200.0, 0.05, 99);
        let one = estimate_cbar(d, gamma, 1.0, n, horizon, delta, seed).unwrap();
        let two = estimate_cbar(d, gamma, 2.0, n, horizon, delta, seed).unwrap();
        assert_relative_eq!(
            two.estimate.value / one.estimate.value,
            2.0f64.powf(gamma),
            max_relative = 1e-12
        );
        let one_u = estimate_cunder(d, gamma, 1.0, n, horizon, delta, seed).unwrap();
        let two_u = estimate_cunder(d, gamma, 2.0, n, horizon, delta, seed).unwrap();
        assert_relative_eq!(
            two_u.estimate.value / one_u.estimate.value,
            2.0f64.powf(gamma),
            max_relative = 1e-12
        );
    }

    #[test]
    fn estimates_are_seed_deterministic() {
        let a = estimate_cbar(3, 0.8, 1.0, 200, 100.0, 0.05, 1234).unwrap();
        let b = estimate_cbar(3, 0.8, 1.0, 200, 100.0, 0.05, 1234).unwrap();
        assert_eq!(a.estimate.value.to_bits(), b.estimate.value.to_bits());
        assert_eq!(a.truncation.to_bits(), b.truncation.to_bits());
        let c = estimate_cunder(3, 0.8, 1.0, 150, 100.0, 0.05, 77).unwrap();
        let d = estimate_cunder(3, 0.8, 1.0, 150, 100.0, 0.05, 77).unwrap();
        assert_eq!(c.estimate.value.to_bits(), d.estimate.value.to_bits());
    }

    /// Rotational symmetry: the upper constant cannot depend on which point
    /// of the unit sphere the path starts from. The production estimator
    /// fixes one start, so probe the underlying factor from a second start
    /// directly and compare.
    #[test]
    fn start_point_on_the_sphere_does_not_matter() {
        let (gamma, n, horizon, delta) = (0.8f64, 2500, 400.0, 0.05);
        let e1 = estimate_cbar(3, gamma, 1.0, n, horizon, delta, 555).unwrap();
        let s = 1.0 / 3.0f64.sqrt();
        let rows =
            occupation_checkpoint_samples(&[s, s, s], 1.0, &[horizon], n, delta, 556).unwrap();
        let pre = cbar_prefactor(3, gamma, 1.0).unwrap();
        let samples: Vec<f64> = rows.iter().map(|r| pre * r[0].powf(gamma)).collect();
        let tilted = EstimatorResult::from_samples(&samples, 556);
        let se = (e1.estimate.std_error.powi(2) + tilted.std_error.powi(2)).sqrt();
        let z = (e1.estimate.value - tilted.value).abs() / se;
        assert!(z < 3.0, "sphere starts disagree: z = {z}");
    }

    /// Horizon truncation must move both estimates monotonically, and in
    /// the documented directions, on common random numbers. The checkpoint
    /// rows are pathwise monotone, so this is exact, not statistical.
    #[test]
    fn horizon_doubling_moves_estimates_monotonically() {
        let horizons = [50.0, 100.0, 200.0, 400.0];
        // upper constant: non-decreasing in the horizon (biased down)
        let curve = c_replace2_curve(&horizons, 3, 0.8, 400, 0.05, 2024).unwrap();
        for pair in curve.windows(2) {
            assert!(pair[1].value >= pair[0].value);
        }
        assert!(curve[3].value > curve[0].value);
        // lower constant: non-increasing (biased up); rebuild its pair
        // moment from one checkpointed run
        let rows =
            occupation_checkpoint_samples(&[0.0; 3], 2.0, &horizons, 600, 0.05, 2025).unwrap();
        let moment = |col: usize| -> f64 {
            (0..300)
                .map(|i| {
                    (rows[2 * i][col] + rows[2 * i + 1][col])
                        .max(0.05)
                        .powf(0.8 - 1.0)
                })
                .sum::<f64>()
                / 300.0
        };
        let values: Vec<f64> = (0..horizons.len()).map(moment).collect();
        for pair in values.windows(2) {
            assert!(pair[1] <= pair[0]);
        }
        assert!(values[3] < values[0]);
    }

    #[test]
    fn lower_constant_is_positive_finite_and_delta_stable() {
        let est = estimate_cunder(3, 0.8, 1.0, 4000, 200.0, 0.05, 31).unwrap();
        assert!(est.estimate.value.is_finite() && est.estimate.value > 0.0);
        assert_eq!(est.bias, BiasDirection::Up);
        assert!(est.truncation >= 0.0);
        // the negative power must not be resolution-fragile: halving the
        // substep moves the estimate by less than one combined SE
        let fine = estimate_cunder(3, 0.8, 1.0, 4000, 200.0, 0.025, 31).unwrap();
        let se = (est.estimate.std_error.powi(2) + fine.estimate.std_error.powi(2)).sqrt();
        assert!(
            (est.estimate.value - fine.estimate.value).abs() < se,
            "delta-halving shift {} vs combined SE {se}",
            (est.estimate.value - fine.estimate.value).abs()
        );
    }

    #[test]
    fn upper_constant_exceeds_lower_across_gamma() {
        for gamma in [0.7, 0.8, 0.9] {
            let both = estimate_limit_constants(3, gamma, 1.0, 3000, 400.0, 0.05, 808).unwrap();
            let z = both.separation_z();
            assert!(
                z >= 3.0,
                "constants not separated at gamma = {gamma}: {} vs {} (z = {z})",
                both.c_bar.estimate.value,
                both.c_under.estimate.value
            );
            assert!(both.c_under.estimate.value > 0.0);
        }
    }

    #[test]
    fn horizon_resolved_factor_vanishes_at_short_horizons() {
        let tiny = c_replace2(1e-4, 3, 0.8, 300, 0.01, 5).unwrap();
        assert!(tiny.value < 1e-3, "factor at vanishing horizon: {}", tiny.value);
    }

    /// The gap between the factor at a moderate horizon and at an
    /// effectively infinite one must fit inside the analytic tail bound:
    /// per path the deficit is at most `min(gamma occ^{gamma-1} T, T^gamma)`
    /// with `T` the mean tail occupation beyond the cut.
    #[test]
    fn horizon_gap_respects_the_tail_bound() {
        let (gamma, n, delta) = (0.8f64, 3000, 0.05);
        let rows = occupation_checkpoint_samples(
            &unit_sphere_start(3),
            1.0,
            &[100.0, 25_600.0],
            n,
            delta,
            606,
        )
        .unwrap();
        let gaps: Vec<f64> = rows
            .iter()
            .map(|r| r[1].powf(gamma) - r[0].powf(gamma))
            .collect();
        let gap = EstimatorResult::from_samples(&gaps, 606);
        assert!(gap.value >= 0.0);
        let tail = occupation_tail_bound(3, 1.0, 100.0).unwrap();
        let bound = rows
            .iter()
            .map(|r| (gamma * r[0].max(delta).powf(gamma - 1.0) * tail).min(tail.powf(gamma)))
            .sum::<f64>()
            / n as f64;
        assert!(
            gap.value <= bound + 3.0 * gap.std_error,
            "observed horizon gap {} exceeds the tail bound {bound}",
            gap.value
        );
    }

    #[test]
    fn too_small_horizons_are_rejected() {
        let err = estimate_cbar(3, 0.8, 1.0, 200, 1.0, 0.05, 9).unwrap_err();
        assert!(err.to_string().contains("horizon"));
    }

    #[test]
    fn bundle_reports_csv_and_serde_round_trip() {
        let both = estimate_limit_constants(3, 0.8, 1.0, 300, 200.0, 0.05, 17).unwrap();
        let csv = both.csv_table();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "name,value,std_error,n,horizon,bias");
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.contains("c_bar,"));
        assert!(csv.contains("c_under,"));
        assert!(csv.contains("c_ba1,"));
        assert!(csv.contains(",down\n"));
        assert!(csv.contains(",up\n"));
        let json = serde_json::to_string(&both).unwrap();
        let back: LimitConstants = serde_json::from_str(&json).unwrap();
        assert_eq!(back.c_bar.estimate.value, both.c_bar.estimate.value);
        assert_eq!(back.c_under.bias, BiasDirection::Up);
    }
}
