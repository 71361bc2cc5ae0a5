//! Dense kernels for the tiny (d x d, r x r) systems solved per row and
//! per column, plus a Jacobi eigensolver for condition checks.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

/// Lower Cholesky factor of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Array2<f64>,
}

impl Cholesky {
    /// Returns `None` when a pivot is not strictly positive.
    pub fn factor(a: ArrayView2<'_, f64>) -> Option<Self> {
        let k = a.nrows();
        let mut l = Array2::<f64>::zeros((k, k));
        for j in 0..k {
            let mut diag = a[[j, j]];
            for p in 0..j {
                diag -= l[[j, p]] * l[[j, p]];
            }
            if !(diag > 0.0) || !diag.is_finite() {
                return None;
            }
            let ljj = diag.sqrt();
            l[[j, j]] = ljj;
            for i in (j + 1)..k {
                let mut s = a[[i, j]];
                for p in 0..j {
                    s -= l[[i, p]] * l[[j, p]];
                }
                l[[i, j]] = s / ljj;
            }
        }
        Some(Self { l })
    }

    pub fn lower(&self) -> &Array2<f64> {
        &self.l
    }

    /// Cheap condition estimate `(max pivot / min pivot)^2`. It never
    /// exceeds the true 2-norm condition number.
    pub fn condition_estimate(&self) -> f64 {
        let diag = self.l.diag();
        let max = diag.iter().cloned().fold(0.0, f64::max);
        let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
        if diag.is_empty() {
            1.0
        } else {
            (max / min).powi(2)
        }
    }

    pub fn solve(&self, b: ArrayView1<'_, f64>) -> Array1<f64> {
        let k = self.l.nrows();
        let mut z = b.to_owned();
        for i in 0..k {
            let mut s = z[i];
            for p in 0..i {
                s -= self.l[[i, p]] * z[p];
            }
            z[i] = s / self.l[[i, i]];
        }
        for i in (0..k).rev() {
            let mut s = z[i];
            for p in (i + 1)..k {
                s -= self.l[[p, i]] * z[p];
            }
            z[i] = s / self.l[[i, i]];
        }
        z
    }

    pub fn inverse(&self) -> Array2<f64> {
        let k = self.l.nrows();
        let mut inv = Array2::zeros((k, k));
        let mut e = Array1::zeros(k);
        for c in 0..k {
            e.fill(0.0);
            e[c] = 1.0;
            let col = self.solve(e.view());
            inv.column_mut(c).assign(&col);
        }
        inv
    }
}

/// Outcome of a guarded SPD solve.
#[derive(Debug, Clone)]
pub struct GuardedSolve {
    pub x: Array1<f64>,
    pub ridged: bool,
}

/// Solves `gram * x = rhs`; when the Cholesky factorization fails or the
/// condition estimate exceeds `max_condition`, retries with
/// `ridge_eps * mean(diag)` added to the diagonal (or `ridge_eps` when the
/// diagonal is zero).
pub fn solve_spd_with_ridge(
    gram: &mut Array2<f64>,
    rhs: ArrayView1<'_, f64>,
    max_condition: f64,
    ridge_eps: f64,
) -> GuardedSolve {
    if let Some(ch) = Cholesky::factor(gram.view()) {
        if ch.condition_estimate() <= max_condition {
            return GuardedSolve { x: ch.solve(rhs), ridged: false };
        }
    }
    let k = gram.nrows();
    let mean_diag = if k == 0 { 0.0 } else { gram.diag().sum() / k as f64 };
    let mut ridge = if mean_diag > 0.0 { ridge_eps * mean_diag } else { ridge_eps };
    loop {
        for t in 0..k {
            gram[[t, t]] += ridge;
        }
        if let Some(ch) = Cholesky::factor(gram.view()) {
            return GuardedSolve { x: ch.solve(rhs), ridged: true };
        }
        // Only reachable for indefinite input; grow until it factors.
        ridge *= 10.0;
    }
}

/// Eigenvalues and eigenvectors of a small symmetric matrix by cyclic
/// Jacobi rotations. Eigenvalues are returned in descending order with the
/// matching eigenvectors as columns.
pub fn symmetric_eigen(a: ArrayView2<'_, f64>) -> (Array1<f64>, Array2<f64>) {
    let k = a.nrows();
    let mut m = a.to_owned();
    let mut v = Array2::<f64>::eye(k);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..k {
            for q in (p + 1)..k {
                off += m[[p, q]] * m[[p, q]];
            }
        }
        let scale: f64 = m.iter().map(|x| x * x).sum();
        if off <= 1e-30 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..k {
            for q in (p + 1)..k {
                let apq = m[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for r in 0..k {
                    let mrp = m[[r, p]];
                    let mrq = m[[r, q]];
                    m[[r, p]] = c * mrp - s * mrq;
                    m[[r, q]] = s * mrp + c * mrq;
                }
                for r in 0..k {
                    let mpr = m[[p, r]];
                    let mqr = m[[q, r]];
                    m[[p, r]] = c * mpr - s * mqr;
                    m[[q, r]] = s * mpr + c * mqr;
                }
                for r in 0..k {
                    let vrp = v[[r, p]];
                    let vrq = v[[r, q]];
                    v[[r, p]] = c * vrp - s * vrq;
                    v[[r, q]] = s * vrp + c * vrq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&x, &y| m[[y, y]].total_cmp(&m[[x, x]]));
    let vals = order.iter().map(|&i| m[[i, i]]).collect();
    let mut vecs = Array2::zeros((k, k));
    for (dst, &src) in order.iter().enumerate() {
        vecs.column_mut(dst).assign(&v.column(src));
    }
    (vals, vecs)
}

/// 2-norm condition number of a symmetric matrix; infinite when the
/// smallest eigenvalue is not positive.
pub fn spd_condition(a: ArrayView2<'_, f64>) -> f64 {
    if a.nrows() == 0 {
        return 1.0;
    }
    let (vals, _) = symmetric_eigen(a);
    let max = vals[0];
    let min = vals[vals.len() - 1];
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Inverse of a symmetric positive definite matrix, refusing when the
/// condition number exceeds `max_condition`.
pub fn spd_inverse(a: ArrayView2<'_, f64>, max_condition: f64) -> Option<Array2<f64>> {
    if spd_condition(a) > max_condition {
        return None;
    }
    Cholesky::factor(a).map(|ch| ch.inverse())
}

/// `v' A v`
pub fn quad_form(a: ArrayView2<'_, f64>, v: ArrayView1<'_, f64>) -> f64 {
    v.dot(&a.dot(&v))
}
