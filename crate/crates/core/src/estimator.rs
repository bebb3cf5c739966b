//! Monte Carlo estimator outputs and deterministic reductions.

use serde::{Deserialize, Serialize};

/// Fixed-order pairwise summation.
///
/// Used for every Monte Carlo reduction in the crate: the tree shape depends
/// only on the slice length, so the result is bit-identical across reruns and
/// worker counts, and rounding error grows like O(log n) instead of O(n).
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        2 => xs[0] + xs[1],
        n if n <= 32 => {
            let mut acc = 0.0;
            for &x in xs {
                acc += x;
            }
            acc
        }
        n => {
            let mid = n / 2;
            pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
        }
    }
}

/// Sample mean via pairwise summation.
pub fn mean(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "mean of empty sample");
    pairwise_sum(xs) / xs.len() as f64
}

/// Unbiased sample variance via pairwise summation.
pub fn sample_variance(xs: &[f64]) -> f64 {
    assert!(xs.len() >= 2, "variance needs at least two samples");
    let m = mean(xs);
    let sq: Vec<f64> = xs.iter().map(|&x| (x - m) * (x - m)).collect();
    pairwise_sum(&sq) / (xs.len() - 1) as f64
}

/// Point estimate with its uncertainty and provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorResult {
    pub value: f64,
    pub std_error: f64,
    pub n: u64,
    pub seed: u64,
    /// Wall-clock diagnostic only; deliberately excluded from CSV rows so that
    /// reruns are byte-identical.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl EstimatorResult {
    /// Reduce i.i.d. samples to (mean, SE of the mean).
    pub fn from_samples(samples: &[f64], seed: u64) -> Self {
        let value = mean(samples);
        let std_error = if samples.len() >= 2 {
            (sample_variance(samples) / samples.len() as f64).sqrt()
        } else {
            f64::INFINITY
        };
        EstimatorResult {
            value,
            std_error,
            n: samples.len() as u64,
            seed,
            wall_time_secs: 0.0,
        }
    }

    /// `|value - reference|` in units of the standard error.
    pub fn z_score(&self, reference: f64) -> f64 {
        (self.value - reference).abs() / self.std_error
    }

    /// CSV cells `(value, std_error, n, seed)`; callers prepend naming columns.
    pub fn csv_cells(&self) -> String {
        format!("{},{},{},{}", self.value, self.std_error, self.n, self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn pairwise_matches_naive_on_small_input() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        let naive: f64 = xs.iter().sum();
        assert_relative_eq!(pairwise_sum(&xs), naive, max_relative = 1e-12);
    }

    #[test]
    fn pairwise_is_order_deterministic() {
        let xs: Vec<f64> = (0..12345).map(|i| 1.0 / (1.0 + i as f64)).collect();
        assert_eq!(pairwise_sum(&xs).to_bits(), pairwise_sum(&xs).to_bits());
    }

    #[test]
    fn estimator_result_basics() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let r = EstimatorResult::from_samples(&xs, 99);
        assert_relative_eq!(r.value, 2.5);
        // var = 5/3, SE = sqrt(5/12)
        assert_relative_eq!(r.std_error, (5.0f64 / 12.0).sqrt(), max_relative = 1e-14);
        assert_eq!(r.n, 4);
        assert_eq!(r.csv_cells(), format!("{},{},4,99", 2.5, (5.0f64 / 12.0).sqrt()));
    }
}
