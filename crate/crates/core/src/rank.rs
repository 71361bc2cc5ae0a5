//! Rank selection by the MSE-based information criterion
//! `eIC(k | g) = log mse(k, g) + k h(n, m)`, where `mse(k, g)` comes from `g`
//! alternating `F`/`L` updates with the coefficients frozen at their OLS
//! values.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::als::{objective_fstar, update_f, update_l};
use crate::data::{check_dims, Covariates, MaskedMatrix, ModelState};
use crate::error::{CovmcError, Result};
use crate::init::{build_w, ols_beta_init};
use crate::propensity::{estimate_alpha, AlphaMode, PropensityFit};
use crate::svd::{truncated_svd, TruncatedSvd};

pub const MSE_FLOOR: f64 = 1e-300;
pub const DEFAULT_C_H: f64 = 0.9;
pub const DEFAULT_DELTA_H: f64 = 0.1;
const RIDGE_EPS: f64 = 1e-8;

/// `C_h n^delta_h sqrt((m + n) / (m n alpha))`
pub fn penalty_h(n: usize, m: usize, alpha_hat: f64, c_h: f64, delta_h: f64) -> f64 {
    let (nf, mf) = (n as f64, m as f64);
    c_h * nf.powf(delta_h) * ((mf + nf) / (mf * nf * alpha_hat)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankConfig {
    pub max_rank: usize,
    pub steps: usize,
    pub c_h: f64,
    pub delta_h: f64,
    /// `None` picks from the observation model (see [`AlphaMode::default_for`]).
    pub alpha_mode: Option<AlphaMode>,
}

impl Default for RankConfig {
    fn default() -> Self {
        Self { max_rank: 10, steps: 3, c_h: DEFAULT_C_H, delta_h: DEFAULT_DELTA_H, alpha_mode: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSelection {
    pub candidates: Vec<usize>,
    pub mse_kg: Vec<f64>,
    pub eic: Vec<f64>,
    pub penalty_h: f64,
    pub r_hat: usize,
    pub g_used: usize,
    pub alpha_mode: AlphaMode,
    pub alpha_hat: f64,
    /// ranks whose fit failed, with the reason
    pub failed: Vec<(usize, String)>,
}

/// Shared pieces of the rank search: `beta_hat`, `W` and its leading
/// singular triplets.
#[derive(Debug, Clone)]
pub struct RankBasis {
    pub beta_hat: Array2<f64>,
    pub svd: TruncatedSvd,
}

impl RankBasis {
    pub fn new(y: &MaskedMatrix, x: &Covariates, prop: &PropensityFit, max_rank: usize) -> Result<Self> {
        check_dims(y, x)?;
        let beta_hat = ols_beta_init(y, x)?;
        Self::with_beta(y, x, beta_hat, prop, max_rank)
    }

    pub fn with_beta(
        y: &MaskedMatrix,
        x: &Covariates,
        beta_hat: Array2<f64>,
        prop: &PropensityFit,
        max_rank: usize,
    ) -> Result<Self> {
        let w = build_w(y, x, &beta_hat, prop)?;
        let k = max_rank.min(y.nrows().min(y.ncols()));
        let svd = truncated_svd(&w, k)?;
        Ok(Self { beta_hat, svd })
    }

    pub fn initial_state(&self, k: usize) -> ModelState {
        let f = self.svd.factors(k);
        ModelState { beta: self.beta_hat.clone(), l: f.l_hat, f: f.f_hat }
    }
}

/// `g` alternations of the `F` then `L` updates with `beta` fixed, from the
/// rank-`k` SVD start. Returns the final state and `f*` after every step.
pub fn fit_fixed_beta(
    y: &MaskedMatrix,
    x: &Covariates,
    basis: &RankBasis,
    k: usize,
    g: usize,
) -> Result<(ModelState, Vec<f64>)> {
    let max = y.nrows().min(y.ncols());
    if k == 0 || k > basis.svd.rank() {
        return Err(CovmcError::RankTooLarge { rank: k, max: basis.svd.rank().min(max) });
    }
    if g == 0 {
        return Err(CovmcError::InvalidInput("steps must be at least 1".into()));
    }
    let mut state = basis.initial_state(k);
    let mut objectives = Vec::with_capacity(g);
    for _ in 0..g {
        state.f = update_f(&state, y, x, RIDGE_EPS).values;
        state.l = update_l(&state, y, x, RIDGE_EPS).values;
        objectives.push(objective_fstar(&state, y, x));
    }
    Ok((state, objectives))
}

/// `(nm)^-1 || Xi o (Y - X beta' - L F') ||_F^2`, i.e. `f* / (n m)`.
pub fn mse_k_g(state: &ModelState, y: &MaskedMatrix, x: &Covariates) -> f64 {
    objective_fstar(state, y, x) / (y.nrows() as f64 * y.ncols() as f64)
}

/// Evaluates the criterion for `k = 1..=max_rank` and picks the minimiser
/// (smallest `k` on ties).
pub fn select_rank(
    y: &MaskedMatrix,
    x: &Covariates,
    prop: &PropensityFit,
    cfg: &RankConfig,
) -> Result<RankSelection> {
    if cfg.max_rank == 0 {
        return Err(CovmcError::InvalidInput("max rank must be at least 1".into()));
    }
    let basis = RankBasis::new(y, x, prop, cfg.max_rank)?;
    select_rank_with_basis(y, x, prop, &basis, cfg)
}

pub fn select_rank_with_basis(
    y: &MaskedMatrix,
    x: &Covariates,
    prop: &PropensityFit,
    basis: &RankBasis,
    cfg: &RankConfig,
) -> Result<RankSelection> {
    let alpha_mode = cfg.alpha_mode.unwrap_or_else(|| AlphaMode::default_for(prop));
    let alpha_hat = estimate_alpha(prop, alpha_mode);
    if !(alpha_hat > 0.0) {
        return Err(CovmcError::InvalidInput("estimated observation rate must be positive".into()));
    }
    let h = penalty_h(y.nrows(), y.ncols(), alpha_hat, cfg.c_h, cfg.delta_h);
    let top = cfg.max_rank.min(basis.svd.rank());

    let results: Vec<(usize, Result<f64>)> = (1..=top)
        .into_par_iter()
        .map(|k| (k, fit_fixed_beta(y, x, basis, k, cfg.steps).map(|(s, _)| mse_k_g(&s, y, x))))
        .collect();

    let mut sel = RankSelection {
        candidates: Vec::new(),
        mse_kg: Vec::new(),
        eic: Vec::new(),
        penalty_h: h,
        r_hat: 0,
        g_used: cfg.steps,
        alpha_mode,
        alpha_hat,
        failed: Vec::new(),
    };
    for (k, res) in results {
        match res {
            Ok(mse) => {
                sel.candidates.push(k);
                sel.mse_kg.push(mse);
                sel.eic.push(mse.max(MSE_FLOOR).ln() + k as f64 * h);
            }
            Err(e) => sel.failed.push((k, e.to_string())),
        }
    }
    let best = sel
        .eic
        .iter()
        .enumerate()
        .fold(None::<(usize, f64)>, |acc, (t, &v)| match acc {
            Some((_, bv)) if bv <= v => acc,
            _ => Some((t, v)),
        })
        .ok_or_else(|| CovmcError::InvalidInput("no candidate rank could be fitted".into()))?;
    sel.r_hat = sel.candidates[best.0];
    Ok(sel)
}

/// `(n m pi_bar)^-1 || Xi o (Y - X beta_hat' - Gamma_hat^k) ||_F^2` for
/// `k = 0..=max_rank`, using the initial (non-iterated) SVD estimates.
pub fn mse_initial_diagnostic(
    y: &MaskedMatrix,
    x: &Covariates,
    basis: &RankBasis,
    prop: &PropensityFit,
    max_rank: usize,
) -> Vec<f64> {
    let (n, m) = (y.nrows(), y.ncols());
    let scale = 1.0 / (n as f64 * m as f64 * prop.mean_pi());
    let sqrt_n = (n as f64).sqrt();
    let f_all = basis.svd.factors(basis.svd.rank());
    let top = max_rank.min(basis.svd.rank());

    // residuals of the observed cells, peeled one component at a time
    let mut cells: Vec<(usize, usize, f64)> = Vec::with_capacity(y.total_observed());
    for i in 0..n {
        let xi = x.row(i);
        for &j in y.observed_cols(i) {
            cells.push((i, j, y.value_unchecked(i, j) - xi.dot(&basis.beta_hat.row(j))));
        }
    }
    let mut out = Vec::with_capacity(top + 1);
    out.push(cells.iter().map(|c| c.2 * c.2).sum::<f64>() * scale);
    for s in 0..top {
        for c in cells.iter_mut() {
            c.2 -= f_all.u[[c.0, s]] * sqrt_n * f_all.f_hat[[c.1, s]];
        }
        out.push(cells.iter().map(|c| c.2 * c.2).sum::<f64>() * scale);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array1};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn penalty_values() {
        // direct evaluation: 0.9 * exp(0.1 ln 200) * sqrt(400 / 20000)
        let direct = 0.9 * (0.1 * 200f64.ln()).exp() * (400.0f64 / 20000.0).sqrt();
        let h = penalty_h(200, 200, 0.5, 0.9, 0.1);
        assert_abs_diff_eq!(h, direct, epsilon = 1e-15);
        assert_abs_diff_eq!(h, 0.21616, epsilon = 1e-4);
        assert_eq!(penalty_h(200, 200, 0.5, 0.0, 0.1), 0.0);
        let n = 300usize;
        assert_abs_diff_eq!(
            penalty_h(n, n, 1.0, 0.9, 0.1),
            0.9 * (n as f64).powf(0.1) * (2.0 / n as f64).sqrt(),
            epsilon = 1e-15
        );
    }

    fn low_rank_problem(n: usize, m: usize, r: usize, noise: f64, p_obs: f64, seed: u64)
        -> (MaskedMatrix, Covariates, PropensityFit) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xm = Array2::from_shape_fn((n, 2), |(_, c)| if c == 0 { 1.0 } else { rng.gen_range(-1.0..1.0) });
        let x = Covariates::new(xm, true).unwrap();
        let beta = Array2::from_shape_fn((m, 2), |_| rng.gen_range(-1.0..1.0));
        let l = Array2::from_shape_fn((n, r), |_| rng.gen_range(-2.0..2.0));
        let f = Array2::from_shape_fn((m, r), |_| rng.gen_range(-2.0..2.0));
        let mut vals = x.matrix().dot(&beta.t()) + l.dot(&f.t());
        vals.mapv_inplace(|v| v + noise * rng.gen_range(-1.0..1.0));
        let mut observed = Array2::from_elem((n, m), true);
        if p_obs < 1.0 {
            observed.mapv_inplace(|_| rng.gen_bool(p_obs));
        }
        let y = MaskedMatrix::from_dense(vals, &observed).unwrap();
        let prop = PropensityFit::fixed(Array1::from_elem(n, p_obs)).unwrap();
        (y, x, prop)
    }

    #[test]
    fn exact_rank_gives_zero_mse() {
        let (y, x, prop) = low_rank_problem(25, 20, 2, 0.0, 1.0, 1);
        let basis = RankBasis::new(&y, &x, &prop, 5).unwrap();
        let (state, _) = fit_fixed_beta(&y, &x, &basis, 2, 3).unwrap();
        assert!(mse_k_g(&state, &y, &x) < 1e-12);
        let sel = select_rank(&y, &x, &prop, &RankConfig { max_rank: 5, ..Default::default() }).unwrap();
        assert_eq!(sel.r_hat, 2);
        let one = select_rank(&y, &x, &prop, &RankConfig { max_rank: 1, ..Default::default() }).unwrap();
        assert_eq!(one.r_hat, 1);
        assert_eq!(one.candidates, vec![1]);
    }

    #[test]
    fn fixed_beta_descent_and_composition() {
        let (y, x, prop) = low_rank_problem(30, 24, 3, 0.5, 0.6, 2);
        let basis = RankBasis::new(&y, &x, &prop, 4).unwrap();
        let (_, objs) = fit_fixed_beta(&y, &x, &basis, 3, 6).unwrap();
        for w in objs.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-9));
        }
        let (one, _) = fit_fixed_beta(&y, &x, &basis, 2, 1).unwrap();
        let mut manual = basis.initial_state(2);
        manual.f = update_f(&manual, &y, &x, RIDGE_EPS).values;
        manual.l = update_l(&manual, &y, &x, RIDGE_EPS).values;
        assert_eq!(one, manual);
        assert_abs_diff_eq!(
            mse_k_g(&one, &y, &x),
            objective_fstar(&one, &y, &x) / (30.0 * 24.0),
            epsilon = 1e-15
        );
    }

    #[test]
    fn mse_hand_value() {
        let x = Covariates::new(Array2::zeros((3, 1)), false).unwrap();
        let y = MaskedMatrix::from_triplets(&[(1, 1, 3.0)], 3, 3).unwrap();
        let state = ModelState::new(Array2::zeros((3, 1)), Array2::zeros((3, 1)), Array2::zeros((3, 1))).unwrap();
        assert_abs_diff_eq!(mse_k_g(&state, &y, &x), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn eic_difference_identity() {
        let (y, x, prop) = low_rank_problem(30, 30, 2, 0.3, 0.7, 3);
        let sel = select_rank(&y, &x, &prop, &RankConfig { max_rank: 5, ..Default::default() }).unwrap();
        let r = 1;
        for (t, &k) in sel.candidates.iter().enumerate() {
            let lhs = sel.eic[t] - sel.eic[r];
            let rhs = (sel.mse_kg[t] / sel.mse_kg[r]).ln() + (k as f64 - 2.0) * sel.penalty_h;
            assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-12);
        }
        let again = select_rank(&y, &x, &prop, &RankConfig { max_rank: 5, ..Default::default() }).unwrap();
        assert_eq!(sel, again);
    }

    #[test]
    fn initial_diagnostic_full_observation_is_monotone() {
        let (y, x, prop) = low_rank_problem(30, 25, 3, 0.5, 1.0, 4);
        let basis = RankBasis::new(&y, &x, &prop, 8).unwrap();
        let curve = mse_initial_diagnostic(&y, &x, &basis, &prop, 8);
        assert_eq!(curve.len(), 9);
        for w in curve.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
        // k = 0: plain observed residual energy scaled by 1 / (n m pi_bar)
        let resid: f64 = y
            .triplets()
            .iter()
            .map(|&(i, j, v)| (v - x.row(i).dot(&basis.beta_hat.row(j))).powi(2))
            .sum();
        assert_abs_diff_eq!(curve[0], resid / (30.0 * 25.0 * prop.mean_pi()), epsilon = 1e-12);
    }

    #[test]
    fn tie_break_prefers_smallest_rank() {
        let x = Covariates::new(array![[1.0], [1.0], [1.0]], true).unwrap();
        let y = MaskedMatrix::from_dense(Array2::ones((3, 3)), &Array2::from_elem((3, 3), true)).unwrap();
        let prop = PropensityFit::fixed(Array1::ones(3)).unwrap();
        // every rank fits perfectly, mse is floored, zero penalty: all eIC equal
        let sel = select_rank(&y, &x, &prop, &RankConfig { max_rank: 3, c_h: 0.0, ..Default::default() }).unwrap();
        assert_eq!(sel.r_hat, 1);
    }
}
