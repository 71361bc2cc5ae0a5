//! Partially observed responses, row covariates and the fitted model state.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{CovmcError, Result};

/// Response matrix together with its observation mask.
///
/// Unobserved cells are stored as `0.0` but can only be reached through
/// [`MaskedMatrix::get`], which returns `None` for them. Per-column and
/// per-row index lists of the observed cells are built once so that the
/// block solvers can gather their systems without scanning the mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedMatrix {
    values: Array2<f64>,
    mask: Array2<u8>,
    col_rows: Vec<Vec<usize>>,
    row_cols: Vec<Vec<usize>>,
}

impl MaskedMatrix {
    /// Builds from `(row, col, value)` triplets on an `n x m` grid.
    pub fn from_triplets(triplets: &[(usize, usize, f64)], n: usize, m: usize) -> Result<Self> {
        let mut values = Array2::zeros((n, m));
        let mut mask = Array2::<u8>::zeros((n, m));
        for &(row, col, value) in triplets {
            if row >= n || col >= m {
                return Err(CovmcError::IndexOutOfRange { row, col, n, m });
            }
            if mask[[row, col]] == 1 {
                return Err(CovmcError::DuplicateEntry { row, col });
            }
            if !value.is_finite() {
                return Err(CovmcError::InvalidInput(format!(
                    "non-finite value at ({row}, {col})"
                )));
            }
            mask[[row, col]] = 1;
            values[[row, col]] = value;
        }
        Ok(Self::assemble(values, mask))
    }

    /// Builds from a dense value matrix and a boolean mask. Values at
    /// unobserved cells are discarded.
    pub fn from_dense(values: Array2<f64>, observed: &Array2<bool>) -> Result<Self> {
        if values.dim() != observed.dim() {
            return Err(CovmcError::DimensionMismatch(format!(
                "values {:?} vs mask {:?}",
                values.dim(),
                observed.dim()
            )));
        }
        let mask = observed.mapv(u8::from);
        let mut values = values;
        for ((idx, v), &o) in values.indexed_iter_mut().zip(mask.iter()) {
            if o == 0 {
                *v = 0.0;
            } else if !v.is_finite() {
                return Err(CovmcError::InvalidInput(format!("non-finite value at {idx:?}")));
            }
        }
        Ok(Self::assemble(values, mask))
    }

    fn assemble(values: Array2<f64>, mask: Array2<u8>) -> Self {
        let (n, m) = mask.dim();
        let mut col_rows = vec![Vec::new(); m];
        let mut row_cols = vec![Vec::new(); n];
        for i in 0..n {
            for j in 0..m {
                if mask[[i, j]] == 1 {
                    col_rows[j].push(i);
                    row_cols[i].push(j);
                }
            }
        }
        Self { values, mask, col_rows, row_cols }
    }

    pub fn nrows(&self) -> usize {
        self.mask.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.mask.ncols()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        (self.mask[[i, j]] == 1).then(|| self.values[[i, j]])
    }

    pub fn is_observed(&self, i: usize, j: usize) -> bool {
        self.mask[[i, j]] == 1
    }

    pub fn mask(&self) -> &Array2<u8> {
        &self.mask
    }

    /// Observed value at a cell known to be observed. Only for crate
    /// internals iterating the precomputed index lists.
    #[inline]
    pub(crate) fn value_unchecked(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.mask[[i, j]], 1);
        self.values[[i, j]]
    }

    /// Rows observed in column `j`, ascending.
    pub fn observed_rows(&self, j: usize) -> &[usize] {
        &self.col_rows[j]
    }

    /// Columns observed in row `i`, ascending.
    pub fn observed_cols(&self, i: usize) -> &[usize] {
        &self.row_cols[i]
    }

    pub fn observed_count(&self, j: usize) -> usize {
        self.col_rows[j].len()
    }

    pub fn row_observed_count(&self, i: usize) -> usize {
        self.row_cols[i].len()
    }

    pub fn total_observed(&self) -> usize {
        self.col_rows.iter().map(Vec::len).sum()
    }

    pub fn observed_fraction(&self) -> f64 {
        let cells = self.nrows() * self.ncols();
        if cells == 0 {
            0.0
        } else {
            self.total_observed() as f64 / cells as f64
        }
    }

    /// Observed cells in row-major order.
    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::with_capacity(self.total_observed());
        for (i, cols) in self.row_cols.iter().enumerate() {
            for &j in cols {
                out.push((i, j, self.values[[i, j]]));
            }
        }
        out
    }
}

/// Row covariate matrix `X` (one row per subject).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Covariates {
    x: Array2<f64>,
    has_intercept: bool,
}

impl Covariates {
    /// Wraps a design matrix. When `has_intercept` is set the first column
    /// must be all ones.
    pub fn new(x: Array2<f64>, has_intercept: bool) -> Result<Self> {
        if x.ncols() == 0 {
            return Err(CovmcError::InvalidInput("covariates need at least one column".into()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(CovmcError::InvalidInput("covariates contain non-finite entries".into()));
        }
        if has_intercept && x.column(0).iter().any(|&v| v != 1.0) {
            return Err(CovmcError::InvalidInput(
                "intercept flagged but column 0 is not all ones".into(),
            ));
        }
        Ok(Self { x, has_intercept })
    }

    /// Detects an intercept from an all-ones first column.
    pub fn detect(x: Array2<f64>) -> Result<Self> {
        let has_intercept = x.ncols() > 0 && x.column(0).iter().all(|&v| v == 1.0);
        Self::new(x, has_intercept)
    }

    pub fn nrows(&self) -> usize {
        self.x.nrows()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn has_intercept(&self) -> bool {
        self.has_intercept
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.x
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.x.row(i)
    }

    /// Covariates without the intercept column (`X~` in the observation model).
    pub fn non_intercept(&self) -> Array2<f64> {
        if self.has_intercept {
            self.x.slice(ndarray::s![.., 1..]).to_owned()
        } else {
            self.x.clone()
        }
    }
}

/// Gathered least-squares system of one column.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnSystem {
    pub design: Array2<f64>,
    pub response: Array1<f64>,
    pub rows: Vec<usize>,
}

/// Design rows and responses of the observed cells of column `j`.
pub fn column_system(y: &MaskedMatrix, x: &Covariates, j: usize) -> ColumnSystem {
    let rows = y.observed_rows(j).to_vec();
    let design = x.matrix().select(Axis(0), &rows);
    let response = rows.iter().map(|&i| y.value_unchecked(i, j)).collect();
    ColumnSystem { design, response, rows }
}

/// Coefficients and latent factors: `Theta = X beta' + L F'`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    /// `m x d`
    pub beta: Array2<f64>,
    /// `n x r`
    pub l: Array2<f64>,
    /// `m x r`
    pub f: Array2<f64>,
}

impl ModelState {
    pub fn new(beta: Array2<f64>, l: Array2<f64>, f: Array2<f64>) -> Result<Self> {
        if l.ncols() != f.ncols() {
            return Err(CovmcError::DimensionMismatch(format!(
                "L has rank {} but F has rank {}",
                l.ncols(),
                f.ncols()
            )));
        }
        if beta.nrows() != f.nrows() {
            return Err(CovmcError::DimensionMismatch(format!(
                "beta has {} rows but F has {}",
                beta.nrows(),
                f.nrows()
            )));
        }
        Ok(Self { beta, l, f })
    }

    pub fn rank(&self) -> usize {
        self.l.ncols()
    }

    #[inline]
    pub fn gamma_at(&self, i: usize, j: usize) -> f64 {
        self.l.row(i).dot(&self.f.row(j))
    }

    #[inline]
    pub fn theta_at(&self, x: &Covariates, i: usize, j: usize) -> f64 {
        x.row(i).dot(&self.beta.row(j)) + self.gamma_at(i, j)
    }

    pub fn gamma(&self) -> Array2<f64> {
        if self.rank() == 0 {
            return Array2::zeros((self.l.nrows(), self.f.nrows()));
        }
        self.l.dot(&self.f.t())
    }

    pub fn theta(&self, x: &Covariates) -> Array2<f64> {
        x.matrix().dot(&self.beta.t()) + self.gamma()
    }
}

pub(crate) fn check_dims(y: &MaskedMatrix, x: &Covariates) -> Result<()> {
    if y.nrows() != x.nrows() {
        return Err(CovmcError::DimensionMismatch(format!(
            "response has {} rows but covariates have {}",
            y.nrows(),
            x.nrows()
        )));
    }
    Ok(())
}
