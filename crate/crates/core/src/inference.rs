//! Plug-in standard errors, confidence intervals and z-tests for entries of
//! `Gamma`, `Theta` and `beta`.
//!
//! With `M_L = n^-1 sum pi_i L_i L_i'`, `M_X = n^-1 sum pi_i X_i X_i'` and
//! `S_F = m^-1 F'F`:
//!
//! - `var(Gamma_ij) = s2 [L_i' M_L^-1 L_i / n + F_j' S_F^-1 F_j / (m pi_i)] + zeta_ij^2 / n`
//! - `var(Theta_ij) = s2 [(L_i' M_L^-1 L_i + X_i' M_X^-1 X_i) / n + F_j' S_F^-1 F_j / (m pi_i)]`
//! - `var(beta_j) = M_X^-1 [n^-1 sum X_i X_i' (xi_ij e_ij^2 + pi_i^2 Gamma_ij^2)] M_X^-1 / n`
//!
//! where `zeta_ij^2 = X_i' M_X^-1 Z_j M_X^-1 X_i` and
//! `Z_j = n^-1 sum_k pi_k^2 Gamma_kj^2 X_k X_k'`.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::als::observed_residuals;
use crate::data::{check_dims, Covariates, MaskedMatrix, ModelState};
use crate::error::{CovmcError, Result};
use crate::linalg::{quad_form, spd_inverse};
use crate::propensity::PropensityFit;
use crate::stats::{norm_quantile, two_sided_p};

pub const MAX_MOMENT_CONDITION: f64 = 1e10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PluginMoments {
    pub sigma2: f64,
    pub m_l: Array2<f64>,
    pub m_x: Array2<f64>,
    pub sigma_f: Array2<f64>,
    pub m_l_inv: Array2<f64>,
    pub m_x_inv: Array2<f64>,
    pub sigma_f_inv: Array2<f64>,
    /// row `j` holds `Z_j` flattened row-major (`m x d^2`)
    pub zeta_basis: Array2<f64>,
    /// row `j` holds `n^-1 sum X_i X_i' (xi e^2 + pi^2 Gamma^2)` flattened
    pub beta_meat: Array2<f64>,
}

impl PluginMoments {
    fn block(flat: &Array2<f64>, j: usize, d: usize) -> ArrayView2<'_, f64> {
        flat.row(j).into_shape_with_order((d, d)).expect("d x d block")
    }

    pub fn zeta(&self, j: usize) -> ArrayView2<'_, f64> {
        Self::block(&self.zeta_basis, j, self.m_x.nrows())
    }

    pub fn meat(&self, j: usize) -> ArrayView2<'_, f64> {
        Self::block(&self.beta_meat, j, self.m_x.nrows())
    }
}

fn degenerate(name: &str) -> CovmcError {
    CovmcError::DegenerateMoments(format!("{name} is singular beyond condition {MAX_MOMENT_CONDITION:.0e}"))
}

/// `n^-1 sum_i w_i v_i v_i'`
fn weighted_gram(v: &Array2<f64>, w: &Array1<f64>) -> Array2<f64> {
    let weighted = v * &w.view().insert_axis(ndarray::Axis(1));
    weighted.t().dot(v) / v.nrows() as f64
}

pub fn plugin_moments(
    state: &ModelState,
    y: &MaskedMatrix,
    x: &Covariates,
    prop: &PropensityFit,
) -> Result<PluginMoments> {
    check_dims(y, x)?;
    let (n, m) = (y.nrows(), y.ncols());
    if prop.pi_hat.len() != n || state.l.nrows() != n || state.f.nrows() != m {
        return Err(CovmcError::DimensionMismatch("state, propensity and data disagree".into()));
    }
    let total = y.total_observed();
    if total == 0 {
        return Err(CovmcError::DegenerateMoments("no observed cells".into()));
    }
    let resid = observed_residuals(state, y, x);
    let sigma2 = resid.iter().map(|e| e * e).sum::<f64>() / total as f64;
    if !(sigma2 > 0.0) {
        return Err(CovmcError::DegenerateMoments("residual variance is zero".into()));
    }

    let pi = &prop.pi_hat;
    let m_l = weighted_gram(&state.l, pi);
    let m_x = weighted_gram(x.matrix(), pi);
    let sigma_f = state.f.t().dot(&state.f) / m as f64;
    let m_l_inv = spd_inverse(m_l.view(), MAX_MOMENT_CONDITION).ok_or_else(|| degenerate("M_L"))?;
    let m_x_inv = spd_inverse(m_x.view(), MAX_MOMENT_CONDITION).ok_or_else(|| degenerate("M_X"))?;
    let sigma_f_inv = spd_inverse(sigma_f.view(), MAX_MOMENT_CONDITION).ok_or_else(|| degenerate("Sigma_F"))?;

    let gamma = state.gamma();
    let mut latent = gamma.mapv(|g| g * g);
    for (k, mut row) in latent.axis_iter_mut(ndarray::Axis(0)).enumerate() {
        row *= pi[k] * pi[k];
    }
    let zeta_basis = weighted_outer_sums(x, &latent);
    let beta_meat = weighted_outer_sums(x, &(&latent + &resid.mapv(|e| e * e)));

    Ok(PluginMoments { sigma2, m_l, m_x, sigma_f, m_l_inv, m_x_inv, sigma_f_inv, zeta_basis, beta_meat })
}

/// Row `j` of the result is `n^-1 sum_k weights_kj X_k X_k'` flattened.
fn weighted_outer_sums(x: &Covariates, weights: &Array2<f64>) -> Array2<f64> {
    let (n, d) = (x.nrows(), x.dim());
    let mut outer = Array2::zeros((n, d * d));
    for k in 0..n {
        let xk = x.row(k);
        for a in 0..d {
            for b in 0..d {
                outer[[k, a * d + b]] = xk[a] * xk[b];
            }
        }
    }
    weights.t().dot(&outer) / n as f64
}

fn check_cell(state: &ModelState, i: usize, j: usize) -> Result<()> {
    let (n, m) = (state.l.nrows(), state.f.nrows());
    if i >= n || j >= m {
        return Err(CovmcError::IndexOutOfRange { row: i, col: j, n, m });
    }
    Ok(())
}

fn finite_sqrt(var: f64) -> Result<f64> {
    if var > 0.0 && var.is_finite() {
        Ok(var.sqrt())
    } else {
        Err(CovmcError::DegenerateMoments(format!("plug-in variance {var} is not positive")))
    }
}

struct Pieces {
    l_term: f64,
    x_term: f64,
    f_term: f64,
    zeta2: f64,
}

fn pieces(i: usize, j: usize, state: &ModelState, x: &Covariates, mom: &PluginMoments, prop: &PropensityFit) -> Pieces {
    let n = state.l.nrows() as f64;
    let m = state.f.nrows() as f64;
    let xi = x.row(i);
    let mx_xi = mom.m_x_inv.dot(&xi);
    Pieces {
        l_term: quad_form(mom.m_l_inv.view(), state.l.row(i)) / n,
        x_term: xi.dot(&mx_xi) / n,
        f_term: quad_form(mom.sigma_f_inv.view(), state.f.row(j)) / (m * prop.pi_hat[i]),
        zeta2: quad_form(mom.zeta(j), mx_xi.view()),
    }
}

pub fn se_gamma(
    i: usize,
    j: usize,
    state: &ModelState,
    x: &Covariates,
    mom: &PluginMoments,
    prop: &PropensityFit,
) -> Result<f64> {
    check_cell(state, i, j)?;
    let p = pieces(i, j, state, x, mom, prop);
    let n = state.l.nrows() as f64;
    finite_sqrt(mom.sigma2 * (p.l_term + p.f_term) + p.zeta2 / n)
}

pub fn se_theta(
    i: usize,
    j: usize,
    state: &ModelState,
    x: &Covariates,
    mom: &PluginMoments,
    prop: &PropensityFit,
) -> Result<f64> {
    check_cell(state, i, j)?;
    let p = pieces(i, j, state, x, mom, prop);
    finite_sqrt(mom.sigma2 * (p.l_term + p.x_term + p.f_term))
}

/// Covariance of `beta_j`, `n^-1 M_X^-1 meat_j M_X^-1`.
pub fn beta_covariance(j: usize, mom: &PluginMoments, n: usize) -> Array2<f64> {
    mom.m_x_inv.dot(&mom.meat(j)).dot(&mom.m_x_inv) / n as f64
}

pub fn se_beta(j: usize, p: usize, state: &ModelState, mom: &PluginMoments) -> Result<f64> {
    let (m, d) = state.beta.dim();
    if j >= m || p >= d {
        return Err(CovmcError::IndexOutOfRange { row: j, col: p, n: m, m: d });
    }
    let cov = beta_covariance(j, mom, state.l.nrows());
    finite_sqrt(cov[[p, p]])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Target {
    Gamma { i: usize, j: usize },
    Theta { i: usize, j: usize },
    Beta { j: usize, p: usize },
}

impl Target {
    /// Parses `gamma:i,j`, `theta:i,j` or `beta:j,p`.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || CovmcError::InvalidInput(format!("cannot parse target '{s}'"));
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        let (a, b) = rest.split_once(',').ok_or_else(bad)?;
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim().parse().map_err(|_| bad())?;
        match kind.trim() {
            "gamma" => Ok(Target::Gamma { i: a, j: b }),
            "theta" | "mu" => Ok(Target::Theta { i: a, j: b }),
            "beta" => Ok(Target::Beta { j: a, p: b }),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    pub target: Target,
    pub estimate: f64,
    pub se: f64,
    pub level: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub null_value: f64,
    pub z: f64,
    pub p_value: f64,
}

impl InferenceReport {
    fn build(target: Target, estimate: f64, se: f64, level: f64, null_value: f64) -> Result<Self> {
        if !(level > 0.0 && level < 1.0) {
            return Err(CovmcError::InvalidInput(format!("level {level} is outside (0, 1)")));
        }
        let half = norm_quantile(0.5 + level / 2.0) * se;
        let z = (estimate - null_value) / se;
        Ok(Self {
            target,
            estimate,
            se,
            level,
            ci_low: estimate - half,
            ci_high: estimate + half,
            null_value,
            z,
            p_value: two_sided_p(z),
        })
    }
}

/// Estimate, standard error, interval and z-test for one target.
pub fn infer(
    target: Target,
    state: &ModelState,
    x: &Covariates,
    prop: &PropensityFit,
    mom: &PluginMoments,
    level: f64,
    null_value: f64,
) -> Result<InferenceReport> {
    let (estimate, se) = match target {
        Target::Gamma { i, j } => (
            { check_cell(state, i, j)?; state.gamma_at(i, j) },
            se_gamma(i, j, state, x, mom, prop)?,
        ),
        Target::Theta { i, j } => (
            { check_cell(state, i, j)?; state.theta_at(x, i, j) },
            se_theta(i, j, state, x, mom, prop)?,
        ),
        Target::Beta { j, p } => {
            let se = se_beta(j, p, state, mom)?;
            (state.beta[[j, p]], se)
        }
    };
    InferenceReport::build(target, estimate, se, level, null_value)
}

/// z-test of `beta_{j,p} = null_value`.
#[allow(clippy::too_many_arguments)]
pub fn z_test_beta(
    j: usize,
    p: usize,
    state: &ModelState,
    y: &MaskedMatrix,
    x: &Covariates,
    prop: &PropensityFit,
    null_value: f64,
    level: f64,
) -> Result<InferenceReport> {
    let mom = plugin_moments(state, y, x, prop)?;
    infer(Target::Beta { j, p }, state, x, prop, &mom, level, null_value)
}
