//! Small statistical toolkit: sample moments, two-sample distances on the
//! line and on the circle, binomial confidence bounds.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("sample is empty")]
    EmptySample,
    #[error("sample contains a non-finite value")]
    NonFinite,
}

/// Mean and standard error of the mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl Estimate {
    /// `|mean − target|` in units of the standard error (0 if both vanish).
    pub fn z_score(&self, target: f64) -> f64 {
        let diff = (self.mean - target).abs();
        if diff == 0.0 {
            0.0
        } else if self.stderr == 0.0 {
            f64::INFINITY
        } else {
            diff / self.stderr
        }
    }
}

/// Sample mean with the unbiased standard error.
pub fn mean_stderr(xs: &[f64]) -> Estimate {
    let n = xs.len();
    if n == 0 {
        return Estimate {
            mean: f64::NAN,
            stderr: f64::NAN,
            n,
        };
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    Estimate {
        mean,
        stderr: (var / n as f64).sqrt(),
        n,
    }
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
}

/// Proportion `k/n` with binomial standard error.
pub fn proportion(k: usize, n: usize) -> Estimate {
    let p = if n == 0 { f64::NAN } else { k as f64 / n as f64 };
    Estimate {
        mean: p,
        stderr: if n == 0 { f64::NAN } else { (p * (1.0 - p) / n as f64).sqrt() },
        n,
    }
}

fn sorted(xs: &[f64]) -> Result<Vec<f64>, StatsError> {
    if xs.is_empty() {
        return Err(StatsError::EmptySample);
    }
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// Walks both sorted samples and returns the extreme values of
/// `F_a − F_b` (max, min) over all evaluation points.
fn ecdf_extremes(a: &[f64], b: &[f64]) -> (f64, f64) {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let (mut hi, mut lo) = (0.0f64, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        let diff = i as f64 / na - j as f64 / nb;
        hi = hi.max(diff);
        lo = lo.min(diff);
    }
    // after one sample is exhausted the remaining differences move toward 0
    // monotonically, so the extremes are already captured; check the tail
    if i < a.len() {
        let diff = i as f64 / na - 1.0;
        lo = lo.min(diff);
    }
    if j < b.len() {
        let diff = 1.0 - j as f64 / nb;
        hi = hi.max(diff);
    }
    (hi, lo)
}

/// Two-sample Kolmogorov–Smirnov distance `sup |F_a − F_b|`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<f64, StatsError> {
    let (a, b) = (sorted(a)?, sorted(b)?);
    let (hi, lo) = ecdf_extremes(&a, &b);
    Ok(hi.max(-lo))
}

/// Two-sample Kuiper distance `sup(F_a − F_b) + sup(F_b − F_a)`; invariant
/// under rotations when applied to circular data in `[0, 1)`.
pub fn kuiper_two_sample(a: &[f64], b: &[f64]) -> Result<f64, StatsError> {
    let (a, b) = (sorted(a)?, sorted(b)?);
    let (hi, lo) = ecdf_extremes(&a, &b);
    Ok(hi - lo)
}

/// One-sample KS distance against a continuous CDF.
pub fn ks_one_sample<F: Fn(f64) -> f64>(xs: &[f64], cdf: F) -> Result<f64, StatsError> {
    let v = sorted(xs)?;
    let n = v.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in v.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    Ok(d)
}

/// Asymptotic p-value of the KS statistic `d` for effective size `n_eff`.
pub fn ks_p_value(d: f64, n_eff: f64) -> f64 {
    let sqrt_n = n_eff.sqrt();
    let lambda = (sqrt_n + 0.12 + 0.11 / sqrt_n) * d;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for j in 1..=100 {
        let jf = f64::from(j);
        let term = 2.0 * (-1.0f64).powi(j - 1) * (-2.0 * jf * jf * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

/// Clopper–Pearson one-sided upper bound on a binomial proportion.
pub fn clopper_pearson_upper(k: usize, n: usize, confidence: f64) -> f64 {
    if n == 0 || k >= n {
        return 1.0;
    }
    let beta = Beta::new(k as f64 + 1.0, (n - k) as f64).expect("valid beta parameters");
    beta.inverse_cdf(confidence)
}

/// Batch-means estimate of a time average from equal-length batches.
pub fn batch_means(batches: &[f64]) -> Estimate {
    mean_stderr(batches)
}

/// Two-proportion z statistic `|p_a − p_b| / sqrt(p(1−p)(1/n_a + 1/n_b))`
/// with the pooled `p`; zero when both proportions agree exactly.
pub fn two_proportion_z(k_a: usize, n_a: usize, k_b: usize, n_b: usize) -> f64 {
    let pa = k_a as f64 / n_a as f64;
    let pb = k_b as f64 / n_b as f64;
    let pooled = (k_a + k_b) as f64 / (n_a + n_b) as f64;
    let se = (pooled * (1.0 - pooled) * (1.0 / n_a as f64 + 1.0 / n_b as f64)).sqrt();
    if (pa - pb).abs() == 0.0 {
        0.0
    } else if se == 0.0 {
        f64::INFINITY
    } else {
        (pa - pb).abs() / se
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn ks_examples() {
        assert_eq!(ks_two_sample(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(ks_two_sample(&[1.0, 2.0], &[5.0, 6.0, 7.0]).unwrap(), 1.0);
        assert_relative_eq!(ks_two_sample(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap(), 1.0 / 3.0);
        assert_eq!(ks_two_sample(&[], &[1.0]), Err(StatsError::EmptySample));
        assert_eq!(ks_two_sample(&[1.0], &[f64::NAN]), Err(StatsError::NonFinite));
    }

    #[test]
    fn ks_with_ties_and_unequal_sizes() {
        let a = [0.0, 0.0, 1.0, 1.0];
        let b = [0.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        // F_a(0) = 1/2, F_b(0) = 1/6
        assert_relative_eq!(ks_two_sample(&a, &b).unwrap(), 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn kuiper_is_rotation_invariant() {
        let a = [0.05, 0.2, 0.33, 0.61, 0.9];
        let b = [0.1, 0.15, 0.5, 0.7, 0.72, 0.95];
        let rot = |xs: &[f64], s: f64| xs.iter().map(|x| (x + s).rem_euclid(1.0)).collect::<Vec<_>>();
        let k0 = kuiper_two_sample(&a, &b).unwrap();
        let k1 = kuiper_two_sample(&rot(&a, 0.37), &rot(&b, 0.37)).unwrap();
        assert_relative_eq!(k0, k1, epsilon = 1e-12);
        assert!(k0 >= ks_two_sample(&a, &b).unwrap());
    }

    #[test]
    fn clopper_pearson_known_values() {
        // zero successes: 1 − (1 − c)^{1/n}
        let ub = clopper_pearson_upper(0, 400, 0.95);
        assert_relative_eq!(ub, 1.0 - 0.05f64.powf(1.0 / 400.0), max_relative = 1e-8);
        assert!(clopper_pearson_upper(5, 400, 0.95) > 5.0 / 400.0);
        assert_eq!(clopper_pearson_upper(3, 3, 0.95), 1.0);
    }

    #[test]
    fn moments() {
        let e = mean_stderr(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(e.mean, 2.5);
        assert_relative_eq!(e.stderr, (5.0f64 / 3.0 / 4.0).sqrt());
        assert_relative_eq!(variance(&[1.0, 2.0, 3.0, 4.0]), 5.0 / 3.0);
        assert_eq!(two_proportion_z(10, 100, 10, 100), 0.0);
        assert_relative_eq!(normal_cdf(0.0), 0.5);
    }

    #[test]
    fn one_sample_ks_uniform() {
        let xs: Vec<f64> = (0..100).map(|i| (f64::from(i) + 0.5) / 100.0).collect();
        let d = ks_one_sample(&xs, |x| x.clamp(0.0, 1.0)).unwrap();
        assert_relative_eq!(d, 0.005, epsilon = 1e-12);
        assert!(ks_p_value(0.3, 100.0) < 1e-6);
        assert!(ks_p_value(0.01, 100.0) > 0.99);
    }
}
