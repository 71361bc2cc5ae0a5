//! Iterative-PCA comparator: impute the unobserved cells with the previous
//! latent estimate, take the rank-`r` SVD, then refit the coefficients by
//! least squares.
//!
//! Observed cells carry the plain residual `Y - X beta'`. The inverse
//! propensity weights only enter through the shared SVD start, where the
//! unobserved cells are zeros.

use std::time::Instant;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::als::{initialize, objective_fstar, update_beta, FitConfig};
use crate::data::{check_dims, Covariates, MaskedMatrix, ModelState};
use crate::error::{CovmcError, Result};
use crate::propensity::PropensityFit;
use crate::svd::{truncated_svd, truncated_svd_warm, TruncatedSvd};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PcaTrace {
    pub objective_per_step: Vec<f64>,
    pub delta_history: Vec<f64>,
    pub steps_taken: usize,
    pub converged: bool,
    pub delta_inf: f64,
    pub ridge_fallbacks: usize,
    pub seconds_per_step: Vec<f64>,
}

/// Fills the unobserved cells of `w_observed` from `gamma_prev`.
pub fn impute(w_observed: &Array2<f64>, gamma_prev: &Array2<f64>, mask: &Array2<u8>) -> Array2<f64> {
    let mut out = w_observed.clone();
    Zip::from(&mut out).and(gamma_prev).and(mask).for_each(|o, &g, &k| {
        if k == 0 {
            *o = g;
        }
    });
    out
}

/// One hard-impute step: the rank-`r` SVD reconstruction of `w_observed`
/// with its unobserved cells taken from `gamma_prev`.
pub fn pca_impute_step(
    w_observed: &Array2<f64>,
    gamma_prev: &Array2<f64>,
    mask: &Array2<u8>,
    r: usize,
) -> Result<Array2<f64>> {
    if w_observed.dim() != gamma_prev.dim() || w_observed.dim() != mask.dim() {
        return Err(CovmcError::DimensionMismatch("imputation inputs differ in shape".into()));
    }
    Ok(truncated_svd(&impute(w_observed, gamma_prev, mask), r)?.reconstruct(r))
}

fn state_from_svd(svd: &TruncatedSvd, beta: Array2<f64>, r: usize) -> ModelState {
    let f = svd.factors(r);
    ModelState { beta, l: f.l_hat, f: f.f_hat }
}

fn residual_matrix(y: &MaskedMatrix, x: &Covariates, beta: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((y.nrows(), y.ncols()));
    for i in 0..y.nrows() {
        let xi = x.row(i);
        for &j in y.observed_cols(i) {
            out[[i, j]] = y.value_unchecked(i, j) - xi.dot(&beta.row(j));
        }
    }
    out
}

/// Runs the comparator from the same start as [`crate::als::fit_iterative`]
/// with the same step budget and stopping rule.
pub fn fit_iterative_pca(
    y: &MaskedMatrix,
    x: &Covariates,
    prop: &PropensityFit,
    cfg: &FitConfig,
) -> Result<(ModelState, PcaTrace)> {
    cfg.validate()?;
    check_dims(y, x)?;
    let init = initialize(y, x, prop, cfg.rank)?;
    iterate_pca(init.state(), y, x, cfg)
}

pub fn iterate_pca(
    start: ModelState,
    y: &MaskedMatrix,
    x: &Covariates,
    cfg: &FitConfig,
) -> Result<(ModelState, PcaTrace)> {
    cfg.validate()?;
    let r = cfg.rank;
    let mut state = start;
    let mut trace = PcaTrace::default();
    let mut gamma = state.gamma();
    let mut theta_prev = state.theta(x);
    let mut right = state.f.clone();

    for _ in 0..cfg.max_steps {
        let t0 = Instant::now();
        let filled = impute(&residual_matrix(y, x, &state.beta), &gamma, y.mask());
        let svd = truncated_svd_warm(&filled, r, &right)?;
        right = svd.v.clone();
        let mut next = state_from_svd(&svd, state.beta.clone(), r);
        let beta = update_beta(&next, y, x, cfg.ridge_eps);
        next.beta = beta.values;
        trace.ridge_fallbacks += beta.ridge_fallbacks;
        state = next;
        gamma = state.gamma();

        let theta = &state.beta.dot(&x.matrix().t()).t() + &gamma;
        let delta = theta
            .iter()
            .zip(theta_prev.iter())
            .fold(0.0f64, |acc, (a, b)| acc.max((a - b) * (a - b)));
        theta_prev = theta;
        trace.objective_per_step.push(objective_fstar(&state, y, x));
        trace.delta_history.push(delta);
        trace.delta_inf = delta;
        trace.steps_taken += 1;
        trace.seconds_per_step.push(t0.elapsed().as_secs_f64());
        if !delta.is_finite() {
            return Err(CovmcError::NonConvergence { what: "iterative PCA", iterations: trace.steps_taken });
        }
        if cfg.converge && delta < cfg.tol {
            trace.converged = true;
            break;
        }
    }
    Ok((state, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::als::fit_iterative;
    use ndarray::Array1;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        a.iter().zip(b.iter()).fold(0.0, |acc, (x, y)| acc.max((x - y).abs()))
    }

    fn random(n: usize, m: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, m), |_| rng.gen_range(-1.0..1.0))
    }

    fn problem(n: usize, m: usize, noise: f64, p_obs: f64, seed: u64) -> (MaskedMatrix, Covariates, PropensityFit) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xm = Array2::from_shape_fn((n, 2), |(_, c)| if c == 0 { 1.0 } else { rng.gen_range(-1.0..1.0) });
        let x = Covariates::new(xm, true).unwrap();
        let beta = Array2::from_shape_fn((m, 2), |_| rng.gen_range(-1.0..1.0));
        let l = Array2::from_shape_fn((n, 2), |_| rng.gen_range(-2.0..2.0));
        let f = Array2::from_shape_fn((m, 2), |_| rng.gen_range(-2.0..2.0));
        let mut vals = x.matrix().dot(&beta.t()) + l.dot(&f.t());
        vals.mapv_inplace(|v| v + noise * rng.gen_range(-1.0..1.0));
        let mut observed = Array2::from_elem((n, m), true);
        if p_obs < 1.0 {
            observed.mapv_inplace(|_| rng.gen_bool(p_obs));
        }
        (
            MaskedMatrix::from_dense(vals, &observed).unwrap(),
            x,
            PropensityFit::fixed(Array1::from_elem(n, p_obs)).unwrap(),
        )
    }

    #[test]
    fn full_mask_step_is_plain_svd() {
        let w = random(12, 9, 1);
        let mask = Array2::ones((12, 9));
        let step = pca_impute_step(&w, &random(12, 9, 2), &mask, 3).unwrap();
        let plain = truncated_svd(&w, 3).unwrap().reconstruct(3);
        assert!(max_abs_diff(&step, &plain) < 1e-12);
    }

    #[test]
    fn fixed_point_and_full_rank_step() {
        let w = random(10, 8, 3);
        let mut mask = Array2::ones((10, 8));
        mask[[4, 5]] = 0;
        let g0 = truncated_svd(&w, 2).unwrap().reconstruct(2);
        // iterate to a fixed point, then one more step leaves it in place
        let mut g = g0;
        for _ in 0..2000 {
            g = pca_impute_step(&w, &g, &mask, 2).unwrap();
        }
        let again = pca_impute_step(&w, &g, &mask, 2).unwrap();
        assert!(max_abs_diff(&again, &g) < 1e-9);

        let full = pca_impute_step(&w, &Array2::zeros((10, 8)), &mask, 8).unwrap();
        for i in 0..10 {
            for j in 0..8 {
                if mask[[i, j]] == 1 {
                    assert!((full[[i, j]] - w[[i, j]]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn noiseless_full_observation_recovers_theta() {
        let (y, x, prop) = problem(30, 25, 0.0, 1.0, 4);
        let (state, trace) = fit_iterative_pca(&y, &x, &prop, &FitConfig::steps(2, 1)).unwrap();
        assert_eq!(trace.steps_taken, 1);
        let truth: Vec<f64> = y.triplets().iter().map(|t| t.2).collect();
        let fit = state.theta(&x);
        for (t, &(i, j, _)) in y.triplets().iter().enumerate() {
            assert!((fit[[i, j]] - truth[t]).abs() < 1e-6);
        }
    }

    #[test]
    fn observed_residual_energy_never_increases() {
        let (y, x, prop) = problem(40, 30, 0.5, 0.5, 5);
        let (_, trace) = fit_iterative_pca(&y, &x, &prop, &FitConfig::steps(2, 25)).unwrap();
        for w in trace.objective_per_step.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-9), "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn converged_fit_is_close_to_least_squares() {
        let (y, x, prop) = problem(60, 50, 0.3, 0.6, 6);
        let (pca, pt) = fit_iterative_pca(&y, &x, &prop, &FitConfig::converged(2)).unwrap();
        let (ls, lt) = fit_iterative(&y, &x, &prop, &FitConfig::converged(2)).unwrap();
        assert!(pt.converged && lt.converged);
        assert!(pt.steps_taken >= lt.steps_taken);
        let a = objective_fstar(&pca, &y, &x);
        let b = objective_fstar(&ls, &y, &x);
        assert!((a - b).abs() <= 0.01 * b);
        let again = fit_iterative_pca(&y, &x, &prop, &FitConfig::converged(2)).unwrap();
        assert_eq!(again.0, pca);
    }
}
