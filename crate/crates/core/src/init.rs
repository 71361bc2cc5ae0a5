//! Initial estimators: per-column least squares for the coefficients and
//! the inverse-propensity-weighted residual matrix fed to the SVD.

use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;

use crate::data::{check_dims, Covariates, MaskedMatrix};
use crate::error::{CovmcError, Result};
use crate::linalg::Cholesky;
use crate::propensity::PropensityFit;

/// Gram matrices whose condition estimate exceeds this are rejected.
pub const MAX_GRAM_CONDITION: f64 = 1e10;

/// Gram matrix and cross product of column `j` with an arbitrary target
/// evaluated on the observed rows.
pub(crate) fn gathered_normal_equations(
    y: &MaskedMatrix,
    x: &Covariates,
    j: usize,
    target: impl Fn(usize) -> f64,
) -> (Array2<f64>, Array1<f64>) {
    let d = x.dim();
    let mut gram = Array2::zeros((d, d));
    let mut rhs = Array1::zeros(d);
    for &i in y.observed_rows(j) {
        let xi = x.row(i);
        let t = target(i);
        for a in 0..d {
            rhs[a] += xi[a] * t;
            for b in 0..=a {
                gram[[a, b]] += xi[a] * xi[b];
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            gram[[b, a]] = gram[[a, b]];
        }
    }
    (gram, rhs)
}

/// Ordinary least squares of each column on `X` over its observed rows,
/// ignoring the latent term. Returns the `m x d` coefficient matrix.
pub fn ols_beta_init(y: &MaskedMatrix, x: &Covariates) -> Result<Array2<f64>> {
    check_dims(y, x)?;
    let d = x.dim();
    let rows: Vec<Result<Array1<f64>>> = (0..y.ncols())
        .into_par_iter()
        .map(|j| {
            if y.observed_count(j) < d {
                return Err(CovmcError::RankDeficientColumn(j));
            }
            let (gram, rhs) = gathered_normal_equations(y, x, j, |i| y.value_unchecked(i, j));
            let chol = Cholesky::factor(gram.view()).ok_or(CovmcError::RankDeficientColumn(j))?;
            if chol.condition_estimate() > MAX_GRAM_CONDITION {
                return Err(CovmcError::RankDeficientColumn(j));
            }
            Ok(chol.solve(rhs.view()))
        })
        .collect();
    let mut beta = Array2::zeros((y.ncols(), d));
    for (j, row) in rows.into_iter().enumerate() {
        beta.row_mut(j).assign(&row?);
    }
    Ok(beta)
}

/// `W_ij = xi_ij (Y_ij - X_i' beta_j) / pi_i`, zero where unobserved.
pub fn build_w(
    y: &MaskedMatrix,
    x: &Covariates,
    beta_hat: &Array2<f64>,
    prop: &PropensityFit,
) -> Result<Array2<f64>> {
    check_dims(y, x)?;
    if prop.pi_hat.len() != y.nrows() {
        return Err(CovmcError::DimensionMismatch(format!(
            "{} propensities for {} rows",
            prop.pi_hat.len(),
            y.nrows()
        )));
    }
    if prop.pi_hat.iter().any(|&p| !(p > 0.0)) {
        return Err(CovmcError::InvalidInput("propensities must be positive".into()));
    }
    let mut w = Array2::zeros((y.nrows(), y.ncols()));
    for (i, mut row) in w.axis_iter_mut(Axis(0)).enumerate() {
        let xi = x.row(i);
        let inv_pi = 1.0 / prop.pi_hat[i];
        for &j in y.observed_cols(i) {
            row[j] = inv_pi * (y.value_unchecked(i, j) - xi.dot(&beta_hat.row(j)));
        }
    }
    Ok(w)
}
