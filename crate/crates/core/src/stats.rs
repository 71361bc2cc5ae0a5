//! Normal distribution helpers and the one-sample Kolmogorov-Smirnov test.

use statrs::distribution::{ContinuousCDF, Normal};

fn standard() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

pub fn norm_cdf(x: f64) -> f64 {
    standard().cdf(x)
}

/// Upper tail `1 - Phi(x)`, accurate far into the tail.
pub fn norm_sf(x: f64) -> f64 {
    standard().sf(x)
}

pub fn norm_quantile(p: f64) -> f64 {
    standard().inverse_cdf(p)
}

/// Two-sided normal p-value `2 (1 - Phi(|z|))`.
pub fn two_sided_p(z: f64) -> f64 {
    (2.0 * norm_sf(z.abs())).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// One-sample KS test of `samples` against `cdf`. The p-value uses the
/// asymptotic Kolmogorov law with the Stephens small-sample correction.
pub fn ks_test(samples: &[f64], cdf: impl Fn(f64) -> f64) -> KsResult {
    let mut xs: Vec<f64> = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        return KsResult { statistic: 0.0, p_value: 1.0 };
    }
    let nf = n as f64;
    let mut d = 0.0f64;
    for (t, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max((t as f64 + 1.0) / nf - f).max(f - t as f64 / nf);
    }
    let sqrt_n = nf.sqrt();
    let lambda = (sqrt_n + 0.12 + 0.11 / sqrt_n) * d;
    KsResult { statistic: d, p_value: kolmogorov_sf(lambda) }
}

/// `P(K > lambda)` for the Kolmogorov distribution.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Mean and standard error of the mean.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    (mean, (var / n as f64).sqrt())
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn known_normal_values() {
        assert_abs_diff_eq!(norm_quantile(0.975), 1.959963984540054, epsilon = 1e-9);
        assert_abs_diff_eq!(norm_quantile(0.5), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(norm_quantile(0.995), 2.5758293035489004, epsilon = 1e-9);
        assert_abs_diff_eq!(norm_cdf(1.0), 0.8413447460685429, epsilon = 1e-10);
        assert_abs_diff_eq!(two_sided_p(0.0), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(two_sided_p(-1.959963984540054), 0.05, epsilon = 1e-10);
        for &p in &[1e-10, 1e-4, 0.01, 0.3, 0.7, 0.99, 1.0 - 1e-9] {
            assert_abs_diff_eq!(norm_cdf(norm_quantile(p)), p, epsilon = 1e-9 * p.max(1e-3));
        }
    }

    #[test]
    fn kolmogorov_tail_values() {
        // tabulated critical values of the limiting distribution
        assert_abs_diff_eq!(kolmogorov_sf(1.3581), 0.05, epsilon = 2e-4);
        assert_abs_diff_eq!(kolmogorov_sf(1.6276), 0.01, epsilon = 1e-4);
        assert_eq!(kolmogorov_sf(0.0), 1.0);
    }

    #[test]
    fn ks_detects_shift_only_when_present() {
        let n = 400;
        let grid: Vec<f64> = (0..n).map(|t| norm_quantile((t as f64 + 0.5) / n as f64)).collect();
        let same = ks_test(&grid, norm_cdf);
        assert!(same.statistic <= 0.5 / n as f64 + 1e-9);
        assert!(same.p_value > 0.99);
        let shifted: Vec<f64> = grid.iter().map(|v| v + 0.5).collect();
        assert!(ks_test(&shifted, norm_cdf).p_value < 1e-6);
    }

    #[test]
    fn summaries() {
        let (m, se) = mean_se(&[1.0, 2.0, 3.0, 4.0]);
        assert_abs_diff_eq!(m, 2.5, epsilon = 1e-15);
        assert_abs_diff_eq!(se, (5.0f64 / 3.0 / 4.0).sqrt(), epsilon = 1e-15);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
