//! Iterative least squares: exact block minimisation of the observed-cell
//! objective `f*(beta, L, F) = || Xi o [L F' - (Y - X beta')] ||_F^2`,
//! updating `beta`, then `F` (with the previous `L`), then `L` (with the new
//! `F`) in every step.

use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{check_dims, Covariates, MaskedMatrix, ModelState};
use crate::error::{CovmcError, Result};
use crate::init::{build_w, gathered_normal_equations, ols_beta_init, MAX_GRAM_CONDITION};
use crate::linalg::solve_spd_with_ridge;
use crate::propensity::PropensityFit;
use crate::svd::{svd_init, SvdFactors};

/// Cap on steps when iterating to convergence.
pub const DEFAULT_CONVERGE_STEPS: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub rank: usize,
    pub max_steps: usize,
    /// Stop early once `||Theta^(g) - Theta^(g-1)||_inf^2 < tol`.
    pub converge: bool,
    pub tol: f64,
    pub ridge_eps: f64,
}

impl FitConfig {
    /// Fixed number of steps (three by default).
    pub fn steps(rank: usize, steps: usize) -> Self {
        Self { rank, max_steps: steps, converge: false, tol: 1e-6, ridge_eps: 1e-8 }
    }

    /// Iterate until the sup-norm change criterion holds.
    pub fn converged(rank: usize) -> Self {
        Self { converge: true, max_steps: DEFAULT_CONVERGE_STEPS, ..Self::steps(rank, 3) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(CovmcError::InvalidInput("rank must be at least 1".into()));
        }
        if self.max_steps == 0 {
            return Err(CovmcError::InvalidInput("max_steps must be at least 1".into()));
        }
        if !(self.tol > 0.0) || !(self.ridge_eps > 0.0) {
            return Err(CovmcError::InvalidInput("tol and ridge_eps must be positive".into()));
        }
        Ok(())
    }
}

impl Default for FitConfig {
    fn default() -> Self {
        Self::steps(1, 3)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitTrace {
    /// `f*` after each full step
    pub objective_per_step: Vec<f64>,
    /// `f*` at the start and after every block update
    pub block_objectives: Vec<f64>,
    /// squared sup-norm change of `Theta` per step
    pub delta_history: Vec<f64>,
    pub steps_taken: usize,
    pub converged: bool,
    pub delta_inf: f64,
    /// number of gathered systems that needed the ridge fallback
    pub ridge_fallbacks: usize,
    pub seconds_per_step: Vec<f64>,
}

/// Output of one block update.
#[derive(Debug, Clone)]
pub struct BlockSolution {
    pub values: Array2<f64>,
    pub ridge_fallbacks: usize,
}

/// Initial estimates and the quantities they were built from.
#[derive(Debug, Clone)]
pub struct Initialization {
    pub beta_hat: Array2<f64>,
    pub w: Array2<f64>,
    pub svd: SvdFactors,
}

impl Initialization {
    pub fn state(&self) -> ModelState {
        ModelState {
            beta: self.beta_hat.clone(),
            l: self.svd.l_hat.clone(),
            f: self.svd.f_hat.clone(),
        }
    }
}

/// Observed-cell sum of squares `sum xi_ij (L_i'F_j - (Y_ij - X_i'beta_j))^2`.
pub fn objective_fstar(state: &ModelState, y: &MaskedMatrix, x: &Covariates) -> f64 {
    (0..y.nrows())
        .map(|i| {
            let xi = x.row(i);
            let li = state.l.row(i);
            y.observed_cols(i)
                .iter()
                .map(|&j| {
                    let r = y.value_unchecked(i, j)
                        - xi.dot(&state.beta.row(j))
                        - li.dot(&state.f.row(j));
                    r * r
                })
                .sum::<f64>()
        })
        .sum()
}

fn stack(rows: Vec<(Array1<f64>, bool)>, width: usize) -> BlockSolution {
    let mut values = Array2::zeros((rows.len(), width));
    let mut ridge_fallbacks = 0;
    for (t, (row, ridged)) in rows.into_iter().enumerate() {
        values.row_mut(t).assign(&row);
        ridge_fallbacks += usize::from(ridged);
    }
    BlockSolution { values, ridge_fallbacks }
}

/// Coefficient block: per column, least squares of `Y - Gamma` on `X` over
/// the observed rows.
pub fn update_beta(
    state: &ModelState,
    y: &MaskedMatrix,
    x: &Covariates,
    ridge_eps: f64,
) -> BlockSolution {
    let rows = (0..y.ncols())
        .into_par_iter()
        .map(|j| {
            let fj = state.f.row(j);
            let (mut gram, rhs) = gathered_normal_equations(y, x, j, |i| {
                y.value_unchecked(i, j) - state.l.row(i).dot(&fj)
            });
            let sol = solve_spd_with_ridge(&mut gram, rhs.view(), MAX_GRAM_CONDITION, ridge_eps);
            (sol.x, sol.ridged)
        })
        .collect();
    stack(rows, x.dim())
}

/// Factor-loading block: per column, `F_j` solves the least squares of
/// `Y - X beta'` on the current `L` over the observed rows.
pub fn update_f(state: &ModelState, y: &MaskedMatrix, x: &Covariates, ridge_eps: f64) -> BlockSolution {
    let r = state.rank();
    let rows = (0..y.ncols())
        .into_par_iter()
        .map(|j| {
            let bj = state.beta.row(j);
            let mut gram = Array2::zeros((r, r));
            let mut rhs = Array1::zeros(r);
            for &i in y.observed_rows(j) {
                let li = state.l.row(i);
                let t = y.value_unchecked(i, j) - x.row(i).dot(&bj);
                accumulate(&mut gram, &mut rhs, li, t);
            }
            symmetrize(&mut gram);
            let sol = solve_spd_with_ridge(&mut gram, rhs.view(), MAX_GRAM_CONDITION, ridge_eps);
            (sol.x, sol.ridged)
        })
        .collect();
    stack(rows, r)
}

/// Factor block: per row, `L_i` solves the least squares of `Y - X beta'`
/// on the current `F` over the observed columns.
pub fn update_l(state: &ModelState, y: &MaskedMatrix, x: &Covariates, ridge_eps: f64) -> BlockSolution {
    let r = state.rank();
    let rows = (0..y.nrows())
        .into_par_iter()
        .map(|i| {
            let xi = x.row(i);
            let mut gram = Array2::zeros((r, r));
            let mut rhs = Array1::zeros(r);
            for &j in y.observed_cols(i) {
                let fj = state.f.row(j);
                let t = y.value_unchecked(i, j) - xi.dot(&state.beta.row(j));
                accumulate(&mut gram, &mut rhs, fj, t);
            }
            symmetrize(&mut gram);
            let sol = solve_spd_with_ridge(&mut gram, rhs.view(), MAX_GRAM_CONDITION, ridge_eps);
            (sol.x, sol.ridged)
        })
        .collect();
    stack(rows, r)
}

#[inline]
fn accumulate(gram: &mut Array2<f64>, rhs: &mut Array1<f64>, v: ndarray::ArrayView1<'_, f64>, t: f64) {
    let r = v.len();
    for a in 0..r {
        rhs[a] += v[a] * t;
        for b in 0..=a {
            gram[[a, b]] += v[a] * v[b];
        }
    }
}

#[inline]
fn symmetrize(gram: &mut Array2<f64>) {
    let r = gram.nrows();
    for a in 0..r {
        for b in 0..a {
            gram[[b, a]] = gram[[a, b]];
        }
    }
}

/// Initial estimates: per-column OLS, IPW residual matrix, rank-`rank` SVD.
pub fn initialize(
    y: &MaskedMatrix,
    x: &Covariates,
    prop: &PropensityFit,
    rank: usize,
) -> Result<Initialization> {
    check_dims(y, x)?;
    let beta_hat = ols_beta_init(y, x)?;
    let w = build_w(y, x, &beta_hat, prop)?;
    let svd = svd_init(&w, rank)?;
    Ok(Initialization { beta_hat, w, svd })
}

fn sup_sq_change(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(u, v)| (u - v) * (u - v)).fold(0.0, f64::max)
}

/// Runs the block updates from `start`. With `cfg.converge` unset exactly
/// `cfg.max_steps` steps are taken.
pub fn iterate(
    start: ModelState,
    y: &MaskedMatrix,
    x: &Covariates,
    cfg: &FitConfig,
) -> Result<(ModelState, FitTrace)> {
    cfg.validate()?;
    check_dims(y, x)?;
    let mut state = start;
    let mut trace = FitTrace::default();
    trace.block_objectives.push(objective_fstar(&state, y, x));
    let mut theta_prev = state.theta(x);

    for _ in 0..cfg.max_steps {
        let t0 = Instant::now();
        let beta = update_beta(&state, y, x, cfg.ridge_eps);
        state.beta = beta.values;
        trace.block_objectives.push(objective_fstar(&state, y, x));

        let f = update_f(&state, y, x, cfg.ridge_eps);
        state.f = f.values;
        trace.block_objectives.push(objective_fstar(&state, y, x));

        let l = update_l(&state, y, x, cfg.ridge_eps);
        state.l = l.values;
        let obj = objective_fstar(&state, y, x);
        trace.block_objectives.push(obj);
        trace.objective_per_step.push(obj);
        trace.ridge_fallbacks += beta.ridge_fallbacks + f.ridge_fallbacks + l.ridge_fallbacks;

        let theta = state.theta(x);
        let delta = sup_sq_change(&theta, &theta_prev);
        theta_prev = theta;
        trace.delta_history.push(delta);
        trace.delta_inf = delta;
        trace.steps_taken += 1;
        trace.seconds_per_step.push(t0.elapsed().as_secs_f64());
        if !delta.is_finite() || state.l.iter().chain(state.f.iter()).any(|v| !v.is_finite()) {
            return Err(CovmcError::NonConvergence { what: "iterative least squares", iterations: trace.steps_taken });
        }
        if cfg.converge && delta < cfg.tol {
            trace.converged = true;
            break;
        }
    }
    Ok((state, trace))
}

/// Full pipeline: initial estimates followed by the block iterations.
pub fn fit_iterative(
    y: &MaskedMatrix,
    x: &Covariates,
    prop: &PropensityFit,
    cfg: &FitConfig,
) -> Result<(ModelState, FitTrace)> {
    cfg.validate()?;
    let init = initialize(y, x, prop, cfg.rank)?;
    iterate(init.state(), y, x, cfg)
}

/// Residual `Y - X beta' - L F'` on the observed cells, laid out densely
/// with zeros elsewhere.
pub fn observed_residuals(state: &ModelState, y: &MaskedMatrix, x: &Covariates) -> Array2<f64> {
    let mut out = Array2::zeros((y.nrows(), y.ncols()));
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let xi = x.row(i);
        let li = state.l.row(i);
        for &j in y.observed_cols(i) {
            row[j] = y.value_unchecked(i, j) - xi.dot(&state.beta.row(j)) - li.dot(&state.f.row(j));
        }
    }
    out
}
