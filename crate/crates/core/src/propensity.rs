//! Logistic model for the per-subject observation probability.
//!
//! Because the covariates vary only by row, the Bernoulli likelihood over all
//! `n x m` cells collapses to a binomial likelihood with `s_i` successes out
//! of `m` trials per subject, so each Newton step costs `O(n d^2)`.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::data::{Covariates, MaskedMatrix};
use crate::error::{CovmcError, Result};
use crate::linalg::{spd_condition, Cholesky};

pub const MAX_NEWTON_ITERATIONS: usize = 100;
/// `|logit(pi)|` beyond this means fitted probabilities of 0 or 1.
const MAX_LINEAR_PREDICTOR: f64 = 25.0;
/// Stop once the max-norm of the per-cell mean score is below this...
pub const SCORE_TOLERANCE: f64 = 1e-10;
/// ...and the Newton step is this small. Under separation the score decays
/// like `exp(-|eta|)` while the step stays of order one.
const STEP_TOLERANCE: f64 = 1e-6;
const MAX_HESSIAN_CONDITION: f64 = 1e12;

/// How the observation rate `alpha_n` is estimated from a fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphaMode {
    /// mean of the fitted probabilities
    Constant,
    /// `exp(gamma0)`
    Covariate,
}

impl AlphaMode {
    /// `Covariate` whenever the observation model has a non-intercept term.
    pub fn default_for(fit: &PropensityFit) -> Self {
        if fit.gamma1.is_empty() {
            AlphaMode::Constant
        } else {
            AlphaMode::Covariate
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityFit {
    pub gamma0: f64,
    pub gamma1: Vec<f64>,
    pub pi_hat: Array1<f64>,
    pub alpha_hat: f64,
    pub alpha_mode: AlphaMode,
    pub iterations: usize,
    pub grad_norm: f64,
    /// `None` when the propensities were fixed rather than fitted
    pub log_likelihood: Option<f64>,
}

impl PropensityFit {
    /// Fit with `pi_hat` fixed to the supplied probabilities. Used when the
    /// true observation rates are known (oracle checks) or for pinned tests.
    pub fn fixed(pi: Array1<f64>) -> Result<Self> {
        if pi.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
            return Err(CovmcError::InvalidInput("fixed propensities must lie in (0, 1]".into()));
        }
        let mean = pi.mean().unwrap_or(1.0);
        Ok(Self {
            gamma0: logit(mean.min(1.0 - 1e-16)),
            gamma1: Vec::new(),
            pi_hat: pi,
            alpha_hat: mean,
            alpha_mode: AlphaMode::Constant,
            iterations: 0,
            grad_norm: 0.0,
            log_likelihood: None,
        })
    }

    pub fn with_alpha_mode(mut self, mode: AlphaMode) -> Self {
        self.alpha_hat = estimate_alpha(&self, mode);
        self.alpha_mode = mode;
        self
    }

    pub fn mean_pi(&self) -> f64 {
        self.pi_hat.mean().unwrap_or(0.0)
    }
}

/// `alpha_hat` under the chosen estimator.
pub fn estimate_alpha(fit: &PropensityFit, mode: AlphaMode) -> f64 {
    match mode {
        AlphaMode::Constant => fit.mean_pi(),
        AlphaMode::Covariate => fit.gamma0.exp(),
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[inline]
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Intercept followed by the non-intercept covariates.
fn observation_design(x: &Covariates) -> Array2<f64> {
    let tilde = x.non_intercept();
    let n = x.nrows();
    let mut z = Array2::ones((n, tilde.ncols() + 1));
    z.slice_mut(ndarray::s![.., 1..]).assign(&tilde);
    z
}

struct Binomial<'a> {
    z: &'a Array2<f64>,
    successes: Vec<f64>,
    trials: f64,
}

impl Binomial<'_> {
    fn log_likelihood(&self, gamma: &Array1<f64>) -> f64 {
        let eta = self.z.dot(gamma);
        eta.iter()
            .zip(&self.successes)
            .map(|(&e, &s)| s * e - self.trials * softplus(e))
            .sum()
    }

    /// Score and negative Hessian, both divided by the number of cells.
    fn derivatives(&self, gamma: &Array1<f64>) -> (Array1<f64>, Array2<f64>) {
        let k = self.z.ncols();
        let cells = self.z.nrows() as f64 * self.trials;
        let eta = self.z.dot(gamma);
        let mut score = Array1::zeros(k);
        let mut info = Array2::zeros((k, k));
        for (i, &e) in eta.iter().enumerate() {
            let p = sigmoid(e);
            let zi = self.z.row(i);
            score.scaled_add((self.successes[i] - self.trials * p) / cells, &zi);
            let w = self.trials * p * (1.0 - p) / cells;
            for a in 0..k {
                for b in 0..=a {
                    info[[a, b]] += w * zi[a] * zi[b];
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                info[[b, a]] = info[[a, b]];
            }
        }
        (score, info)
    }
}

/// Per-cell mean score of the observation log-likelihood at `(gamma0, gamma1)`.
pub fn score(mask: &MaskedMatrix, x: &Covariates, gamma0: f64, gamma1: &[f64]) -> Array1<f64> {
    let z = observation_design(x);
    let model = binomial(mask, &z);
    let mut gamma = Array1::zeros(z.ncols());
    gamma[0] = gamma0;
    for (t, &g) in gamma1.iter().enumerate() {
        gamma[t + 1] = g;
    }
    model.derivatives(&gamma).0
}

/// Full observation log-likelihood at `(gamma0, gamma1)`.
pub fn log_likelihood(mask: &MaskedMatrix, x: &Covariates, gamma0: f64, gamma1: &[f64]) -> f64 {
    let z = observation_design(x);
    let model = binomial(mask, &z);
    let mut gamma = Array1::zeros(z.ncols());
    gamma[0] = gamma0;
    for (t, &g) in gamma1.iter().enumerate() {
        gamma[t + 1] = g;
    }
    model.log_likelihood(&gamma)
}

fn binomial<'a>(mask: &MaskedMatrix, z: &'a Array2<f64>) -> Binomial<'a> {
    Binomial {
        z,
        successes: (0..mask.nrows()).map(|i| mask.row_observed_count(i) as f64).collect(),
        trials: mask.ncols() as f64,
    }
}

/// Maximum-likelihood fit of `P(observed | X~_i) = sigmoid(gamma0 + X~_i' gamma1)`.
///
/// An intercept is always part of the observation model; when `x` carries
/// one it is reused, otherwise it is added.
pub fn fit_propensity(mask: &MaskedMatrix, x: &Covariates) -> Result<PropensityFit> {
    if mask.nrows() != x.nrows() {
        return Err(CovmcError::DimensionMismatch(format!(
            "mask has {} rows but covariates have {}",
            mask.nrows(),
            x.nrows()
        )));
    }
    let n = mask.nrows();
    let m = mask.ncols();
    if n == 0 || m == 0 {
        return Err(CovmcError::InvalidInput("empty observation mask".into()));
    }
    let z = observation_design(x);
    let model = binomial(mask, &z);
    if model.successes.iter().all(|&s| s == 0.0) || model.successes.iter().all(|&s| s == m as f64)
    {
        return Err(CovmcError::Separation(
            "every subject is either fully observed or fully missing".into(),
        ));
    }

    let k = z.ncols();
    let overall = model.successes.iter().sum::<f64>() / (n as f64 * m as f64);
    let mut gamma = Array1::zeros(k);
    gamma[0] = logit(overall);
    let mut ll = model.log_likelihood(&gamma);

    let eta_max = |g: &Array1<f64>| z.dot(g).iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    for iter in 0..MAX_NEWTON_ITERATIONS {
        let (score, info) = model.derivatives(&gamma);
        let grad_norm = score.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        let cond = spd_condition(info.view());
        if cond > MAX_HESSIAN_CONDITION {
            return Err(CovmcError::Separation(format!(
                "Hessian condition estimate {cond:.3e} exceeds {MAX_HESSIAN_CONDITION:.0e}"
            )));
        }
        let chol = Cholesky::factor(info.view())
            .ok_or_else(|| CovmcError::Separation("Hessian is not positive definite".into()))?;
        let step = chol.solve(score.view());
        let step_norm = step.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        if grad_norm <= SCORE_TOLERANCE && step_norm <= STEP_TOLERANCE {
            let eta = eta_max(&gamma);
            if eta > MAX_LINEAR_PREDICTOR {
                return Err(CovmcError::Separation(format!("fitted linear predictor reaches {eta:.1}")));
            }
            return Ok(finish(&z, gamma, iter, grad_norm, ll));
        }

        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &gamma + &(&step * t);
            let cand_ll = model.log_likelihood(&cand);
            // Rounding in the likelihood sum dominates near the optimum.
            if cand_ll >= ll - 1e-13 * ll.abs().max(1.0) {
                gamma = cand;
                ll = cand_ll.max(ll);
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
        let eta = eta_max(&gamma);
        if eta > MAX_LINEAR_PREDICTOR {
            return Err(CovmcError::Separation(format!("fitted linear predictor reaches {eta:.1}")));
        }
    }
    Err(CovmcError::NonConvergence { what: "logistic propensity fit", iterations: MAX_NEWTON_ITERATIONS })
}

fn finish(z: &Array2<f64>, gamma: Array1<f64>, iterations: usize, grad_norm: f64, ll: f64) -> PropensityFit {
    let pi_hat = z.dot(&gamma).mapv(sigmoid);
    let mut fit = PropensityFit {
        gamma0: gamma[0],
        gamma1: gamma.iter().skip(1).cloned().collect(),
        pi_hat,
        alpha_hat: 0.0,
        alpha_mode: AlphaMode::Constant,
        iterations,
        grad_norm,
        log_likelihood: Some(ll),
    };
    let mode = AlphaMode::default_for(&fit);
    fit.alpha_hat = estimate_alpha(&fit, mode);
    fit.alpha_mode = mode;
    fit
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};

    /// Mask where row `i` has its first `counts[i]` columns observed.
    fn mask_with_counts(counts: &[usize], m: usize) -> MaskedMatrix {
        let mut trip = Vec::new();
        for (i, &c) in counts.iter().enumerate() {
            for j in 0..c {
                trip.push((i, j, 0.0));
            }
        }
        MaskedMatrix::from_triplets(&trip, counts.len(), m).unwrap()
    }

    #[test]
    fn intercept_only_matches_observed_fraction() {
        let mask = mask_with_counts(&[4, 4, 4, 4, 4], 10);
        let x = Covariates::new(Array2::ones((5, 1)), true).unwrap();
        let fit = fit_propensity(&mask, &x).unwrap();
        assert_abs_diff_eq!(fit.gamma0, -0.405_465_108_108_164_4, epsilon = 1e-9);
        for &p in &fit.pi_hat {
            assert_abs_diff_eq!(p, 0.4, epsilon = 1e-12);
        }
        assert_eq!(fit.alpha_mode, AlphaMode::Constant);
        assert_abs_diff_eq!(fit.alpha_hat, 0.4, epsilon = 1e-12);
    }

    /// Brute-force maximiser over a grid that is repeatedly narrowed around
    /// the best node.
    fn grid_search(mask: &MaskedMatrix, x: &Covariates) -> (f64, f64) {
        let (mut c0, mut c1, mut half) = (0.0, 0.0, 3.0);
        for _ in 0..40 {
            let mut best = (f64::NEG_INFINITY, c0, c1);
            for a in 0..=40 {
                for b in 0..=40 {
                    let g0 = c0 - half + 2.0 * half * a as f64 / 40.0;
                    let g1 = c1 - half + 2.0 * half * b as f64 / 40.0;
                    let ll = log_likelihood(mask, x, g0, &[g1]);
                    if ll > best.0 {
                        best = (ll, g0, g1);
                    }
                }
            }
            c0 = best.1;
            c1 = best.2;
            half *= 0.25;
        }
        (c0, c1)
    }

    #[test]
    fn two_parameter_fit_matches_grid_search() {
        let mask = mask_with_counts(&[200, 500, 800], 1000);
        let x = Covariates::new(array![[1.0, -1.0], [1.0, 0.0], [1.0, 1.0]], true).unwrap();
        let fit = fit_propensity(&mask, &x).unwrap();
        let (g0, g1) = grid_search(&mask, &x);
        assert_abs_diff_eq!(fit.gamma0, g0, epsilon = 1e-4);
        assert_abs_diff_eq!(fit.gamma1[0], g1, epsilon = 1e-4);
        // logits of 0.2, 0.5, 0.8 are collinear in x
        assert_abs_diff_eq!(fit.gamma1[0], 4f64.ln(), epsilon = 1e-8);
        let s = score(&mask, &x, fit.gamma0, &fit.gamma1);
        assert!(s.iter().all(|v| v.abs() <= 1e-8));
    }

    #[test]
    fn covariates_without_intercept_get_one() {
        let mask = mask_with_counts(&[2, 5, 8, 3], 10);
        let x = Covariates::new(array![[-1.0], [0.0], [1.0], [0.5]], false).unwrap();
        let fit = fit_propensity(&mask, &x).unwrap();
        assert_eq!(fit.gamma1.len(), 1);
        assert_eq!(fit.alpha_mode, AlphaMode::Covariate);
        assert_abs_diff_eq!(fit.alpha_hat, fit.gamma0.exp(), epsilon = 1e-15);
    }

    #[test]
    fn scale_equivariance() {
        let mask = mask_with_counts(&[2, 5, 8, 3, 6], 10);
        let base = array![[-1.0, 0.3], [0.0, -0.2], [1.0, 0.1], [0.5, 0.9], [-0.4, -0.7]];
        let x1 = Covariates::new(base.clone(), false).unwrap();
        let x2 = Covariates::new(base * 3.0, false).unwrap();
        let f1 = fit_propensity(&mask, &x1).unwrap();
        let f2 = fit_propensity(&mask, &x2).unwrap();
        for (a, b) in f1.gamma1.iter().zip(&f2.gamma1) {
            assert_abs_diff_eq!(a / 3.0, *b, epsilon = 1e-8);
        }
        for (a, b) in f1.pi_hat.iter().zip(f2.pi_hat.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-8);
        }
    }

    #[test]
    fn separation_is_reported() {
        let all = mask_with_counts(&[10, 10, 10], 10);
        let x = Covariates::new(Array2::ones((3, 1)), true).unwrap();
        assert!(matches!(fit_propensity(&all, &x), Err(CovmcError::Separation(_))));
        // covariate perfectly splits observed from unobserved subjects
        let split = mask_with_counts(&[0, 0, 10, 10], 10);
        let x = Covariates::new(array![[-1.0], [-2.0], [1.0], [2.0]], false).unwrap();
        assert!(fit_propensity(&split, &x).is_err());
    }

    #[test]
    fn alpha_estimators() {
        let fit = PropensityFit::fixed(Array1::from_elem(4, 0.4)).unwrap();
        assert_abs_diff_eq!(estimate_alpha(&fit, AlphaMode::Constant), 0.4, epsilon = 1e-15);
        let mut zero = fit.clone();
        zero.gamma0 = 0.0;
        assert_eq!(estimate_alpha(&zero, AlphaMode::Covariate), 1.0);
    }
}
