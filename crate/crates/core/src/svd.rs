//! Truncated SVD of the inverse-propensity-weighted residual matrix and the
//! factor split used to initialise the iterations.
//!
//! The top singular pairs come from the symmetric eigendecomposition of the
//! Gram matrix on the smaller side (`W'W` when `m <= n`, else `WW'`); the
//! other side is recovered as `W v / d` and re-orthonormalised. Each pair is
//! sign-normalised so that the largest-magnitude entry of `u` is positive
//! (lowest index wins ties), which makes the output reproducible.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{CovmcError, Result};

/// Leading singular triplets of a matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncatedSvd {
    /// `n x k`, orthonormal columns
    pub u: Array2<f64>,
    /// descending, non-negative
    pub d: Array1<f64>,
    /// `m x k`, orthonormal columns
    pub v: Array2<f64>,
}

impl TruncatedSvd {
    pub fn rank(&self) -> usize {
        self.d.len()
    }

    /// `sum_{s < k} d_s u_s v_s'` for the leading `k <= rank` pairs.
    pub fn reconstruct(&self, k: usize) -> Array2<f64> {
        let k = k.min(self.rank());
        let u = self.u.slice(ndarray::s![.., ..k]);
        let v = self.v.slice(ndarray::s![.., ..k]);
        let ud = &u * &self.d.slice(ndarray::s![..k]);
        ud.dot(&v.t())
    }

    /// Splits the leading `k` pairs into `L = sqrt(n) U_k` and
    /// `F = V_k diag(d_k) / sqrt(n)`.
    pub fn factors(&self, k: usize) -> SvdFactors {
        let k = k.min(self.rank());
        let n = self.u.nrows() as f64;
        let u = self.u.slice(ndarray::s![.., ..k]).to_owned();
        let v = self.v.slice(ndarray::s![.., ..k]).to_owned();
        let d = self.d.slice(ndarray::s![..k]).to_owned();
        let l_hat = &u * n.sqrt();
        let f_hat = (&v * &d) / n.sqrt();
        SvdFactors { u, d, v, l_hat, f_hat }
    }
}

/// Rank-`r` SVD estimate of the latent matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvdFactors {
    pub u: Array2<f64>,
    pub d: Array1<f64>,
    pub v: Array2<f64>,
    /// `sqrt(n) U_r`, so that `L'L / n = I`
    pub l_hat: Array2<f64>,
    /// `V_r diag(d_r) / sqrt(n)`
    pub f_hat: Array2<f64>,
}

impl SvdFactors {
    pub fn gamma(&self) -> Array2<f64> {
        self.l_hat.dot(&self.f_hat.t())
    }
}

fn to_faer(a: &Array2<f64>) -> faer::Mat<f64> {
    faer::Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// Leading `k` singular triplets of `w`.
pub fn truncated_svd(w: &Array2<f64>, k: usize) -> Result<TruncatedSvd> {
    let (n, m) = w.dim();
    let max = n.min(m);
    if k > max {
        return Err(CovmcError::RankTooLarge { rank: k, max });
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(CovmcError::InvalidInput("SVD input has non-finite entries".into()));
    }
    // Results must not depend on the thread pool.
    faer::set_global_parallelism(faer::Parallelism::None);

    let tall = m <= n;
    let fw = to_faer(w);
    let gram = if tall { fw.transpose() * &fw } else { &fw * fw.transpose() };
    let eig = gram.selfadjoint_eigendecomposition(faer::Side::Lower);
    let vecs = eig.u();
    let side = max;

    // faer returns ascending eigenvalues
    let mut small = Array2::zeros((side, k));
    for s in 0..k {
        let src = side - 1 - s;
        for t in 0..side {
            small[[t, s]] = vecs.read(t, src);
        }
    }

    // The other side is W v / d. Taking d = |W v| rather than the square
    // root of the eigenvalue keeps small singular values accurate.
    let mut big = if tall { w.dot(&small) } else { w.t().dot(&small) };
    let mut d: Array1<f64> = (0..k).map(|s| big.column(s).dot(&big.column(s)).sqrt()).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| d[b].total_cmp(&d[a]));
    if order.iter().enumerate().any(|(p, &s)| p != s) {
        small = small.select(ndarray::Axis(1), &order);
        big = big.select(ndarray::Axis(1), &order);
        d = d.select(ndarray::Axis(0), &order);
    }
    let d_max = d.iter().cloned().fold(0.0, f64::max);
    let cutoff = d_max * (n.max(m) as f64) * f64::EPSILON;
    let mut degenerate = vec![false; k];
    for s in 0..k {
        if d[s] > cutoff && d[s] > 0.0 {
            big.column_mut(s).mapv_inplace(|x| x / d[s]);
        } else {
            degenerate[s] = true;
            d[s] = 0.0;
            big.column_mut(s).fill(0.0);
        }
    }
    orthonormalize(&mut big, &degenerate);

    let (mut u, mut v) = if tall { (big, small) } else { (small, big) };
    normalize_signs(&mut u, &mut v);
    Ok(TruncatedSvd { u, d, v })
}

/// Leading `k` singular triplets by block subspace iteration started from
/// the columns of `start` (`m x k0`, typically the previous right singular
/// vectors of a nearby matrix). Falls back to [`truncated_svd`] when the
/// iteration stalls.
pub fn truncated_svd_warm(w: &Array2<f64>, k: usize, start: &Array2<f64>) -> Result<TruncatedSvd> {
    let (n, m) = w.dim();
    let max = n.min(m);
    if k > max {
        return Err(CovmcError::RankTooLarge { rank: k, max });
    }
    let p = (k + WARM_OVERSAMPLE).min(max);
    if p >= max || start.nrows() != m || w.iter().any(|v| !v.is_finite()) {
        return truncated_svd(w, k);
    }
    let mut basis = Array2::zeros((m, p));
    let k0 = start.ncols().min(p);
    basis.slice_mut(ndarray::s![.., ..k0]).assign(&start.slice(ndarray::s![.., ..k0]));
    // fixed pseudo-random padding keeps the start deterministic
    for c in k0..p {
        for t in 0..m {
            let h = (t as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (c as u64 + 1).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
            basis[[t, c]] = (h >> 11) as f64 / (1u64 << 53) as f64 - 0.5;
        }
    }
    orthonormalize(&mut basis, &vec![false; p]);

    let scale = w.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
    for _ in 0..WARM_MAX_ITERATIONS {
        let mut q = w.dot(&basis);
        orthonormalize(&mut q, &vec![false; p]);
        // Rayleigh-Ritz on B = Q'W
        let b = q.t().dot(w);
        let (_, vecs) = crate::linalg::symmetric_eigen(b.dot(&b.t()).view());
        let u_all = q.dot(&vecs);
        let mut v_all = b.t().dot(&vecs);
        let mut d = Array1::zeros(p);
        for s in 0..p {
            let norm = v_all.column(s).dot(&v_all.column(s)).sqrt();
            d[s] = norm;
            if norm > 0.0 {
                v_all.column_mut(s).mapv_inplace(|x| x / norm);
            }
        }
        let wv = w.dot(&v_all.slice(ndarray::s![.., ..k]));
        let mut worst = 0.0f64;
        for s in 0..k {
            let r = &wv.column(s) - &(&u_all.column(s) * d[s]);
            worst = worst.max(r.dot(&r).sqrt());
        }
        if worst <= WARM_TOLERANCE * d[0].max(scale) && d[k - 1] > 0.0 {
            let mut u = u_all.slice(ndarray::s![.., ..k]).to_owned();
            let mut v = v_all.slice(ndarray::s![.., ..k]).to_owned();
            normalize_signs(&mut u, &mut v);
            return Ok(TruncatedSvd { u, d: d.slice(ndarray::s![..k]).to_owned(), v });
        }
        basis = v_all;
        orthonormalize(&mut basis, &vec![false; p]);
    }
    truncated_svd(w, k)
}

const WARM_OVERSAMPLE: usize = 4;
const WARM_MAX_ITERATIONS: usize = 200;
const WARM_TOLERANCE: f64 = 1e-11;

/// Modified Gram-Schmidt in column order; columns flagged `fill` (and
/// columns that collapse numerically) are replaced by the first standard
/// basis vector that remains independent.
fn orthonormalize(a: &mut Array2<f64>, fill: &[bool]) {
    let (rows, cols) = a.dim();
    let mut next_basis = 0usize;
    for c in 0..cols {
        let mut attempts = 0;
        loop {
            if fill[c] || attempts > 0 {
                a.column_mut(c).fill(0.0);
                a[[next_basis % rows, c]] = 1.0;
                next_basis += 1;
            }
            for _pass in 0..2 {
                for p in 0..c {
                    let proj = a.column(p).dot(&a.column(c));
                    let (prev, mut cur) = a.multi_slice_mut((ndarray::s![.., p], ndarray::s![.., c]));
                    cur.scaled_add(-proj, &prev);
                }
            }
            let norm = a.column(c).dot(&a.column(c)).sqrt();
            if norm > 1e-8 || attempts > rows {
                a.column_mut(c).mapv_inplace(|x| x / norm);
                break;
            }
            attempts += 1;
        }
    }
}

fn normalize_signs(u: &mut Array2<f64>, v: &mut Array2<f64>) {
    for s in 0..u.ncols() {
        let col = u.column(s);
        let mut best = 0usize;
        let mut best_abs = -1.0;
        for (t, &x) in col.iter().enumerate() {
            // near-equal magnitudes count as ties
            if x.abs() > best_abs * (1.0 + 1e-10) {
                best_abs = x.abs();
                best = t;
            }
        }
        if col[best] < 0.0 {
            u.column_mut(s).mapv_inplace(|x| -x);
            v.column_mut(s).mapv_inplace(|x| -x);
        }
    }
}

/// Rank-`r` SVD initialisation `Gamma_hat = L_hat F_hat'` of `w`.
pub fn svd_init(w: &Array2<f64>, r: usize) -> Result<SvdFactors> {
    if r == 0 {
        return Err(CovmcError::InvalidInput("rank must be at least 1".into()));
    }
    Ok(truncated_svd(w, r)?.factors(r))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frob2(a: &Array2<f64>) -> f64 {
        a.iter().map(|x| x * x).sum()
    }
    use approx::assert_abs_diff_eq;
    use ndarray::Axis;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, m: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, m), |_| rng.gen_range(-1.0..1.0))
    }

    fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    /// Power iteration with deflation, independent of the Gram eigensolver.
    fn power_oracle(w: &Array2<f64>, k: usize) -> Vec<f64> {
        let mut residual = w.clone();
        let mut out = Vec::new();
        for s in 0..k {
            let mut v = Array1::from_shape_fn(w.ncols(), |t| 1.0 + ((t + 7 * s) % 5) as f64);
            let mut sigma = 0.0;
            for _ in 0..20000 {
                let u = residual.dot(&v);
                let nu = u.dot(&u).sqrt();
                let u = u / nu;
                let nv_vec = residual.t().dot(&u);
                let nv = nv_vec.dot(&nv_vec).sqrt();
                let next = nv_vec / nv;
                let change = (&next - &v).iter().map(|x| x.abs()).fold(0.0, f64::max);
                v = next;
                if (nv - sigma).abs() < 1e-15 * nv && change < 1e-13 {
                    sigma = nv;
                    break;
                }
                sigma = nv;
            }
            let u = residual.dot(&v) / sigma;
            let outer = u
                .view()
                .insert_axis(Axis(1))
                .dot(&v.view().insert_axis(Axis(0)))
                * sigma;
            residual = residual - outer;
            out.push(sigma);
        }
        out
    }

    #[test]
    fn exact_rank_one() {
        let mut u = Array1::from_vec(vec![1.0, -2.0, 2.0]);
        u /= 3.0;
        let mut v = Array1::from_vec(vec![3.0, 0.0, 4.0, 0.0]);
        v /= 5.0;
        let w = u.view().insert_axis(Axis(1)).dot(&v.view().insert_axis(Axis(0)));
        let f = svd_init(&w, 1).unwrap();
        assert!(max_abs_diff(&f.gamma(), &w) < 1e-10);
        assert_abs_diff_eq!(f.d[0], 1.0, epsilon = 1e-12);
        // largest |u| entry positive
        assert!(f.u[[1, 0]] > 0.0);
    }

    #[test]
    fn full_rank_reconstruction_both_shapes() {
        for &(n, m) in &[(12, 7), (7, 12), (9, 9)] {
            let w = random(n, m, 3 + n as u64);
            let f = svd_init(&w, n.min(m)).unwrap();
            assert!(max_abs_diff(&f.gamma(), &w) < 1e-8, "{n}x{m}");
            let ltl = f.l_hat.t().dot(&f.l_hat) / n as f64;
            assert!(max_abs_diff(&ltl, &Array2::eye(n.min(m))) < 1e-8);
            let udv = (&f.u * &f.d).dot(&f.v.t());
            assert!(max_abs_diff(&udv, &f.gamma()) < 1e-8);
        }
    }

    #[test]
    fn matches_power_iteration_oracle() {
        let w = random(50, 40, 11);
        let f = svd_init(&w, 3).unwrap();
        let oracle = power_oracle(&w, 3);
        for s in 0..3 {
            assert_abs_diff_eq!(f.d[s], oracle[s], epsilon = 1e-6);
        }
        let wide = random(30, 45, 12);
        let f = svd_init(&wide, 3).unwrap();
        let oracle = power_oracle(&wide, 3);
        for s in 0..3 {
            assert_abs_diff_eq!(f.d[s], oracle[s], epsilon = 1e-6);
        }
    }

    #[test]
    fn eckart_young_and_tail_energy() {
        let w = random(30, 20, 5);
        let full = truncated_svd(&w, 20).unwrap();
        let total = frob2(&w);
        let mut prev = f64::INFINITY;
        for k in 0..=20 {
            let err = frob2(&(&w - &full.reconstruct(k)));
            let tail: f64 = full.d.iter().skip(k).map(|x| x * x).sum();
            assert!((err - tail).abs() <= 1e-8 * total);
            assert!(err <= prev + 1e-12);
            prev = err;
        }
        assert!(full.d.windows(2).into_iter().all(|p| p[0] >= p[1]));
    }

    #[test]
    fn rank_deficient_input_still_orthonormal() {
        let a = random(10, 2, 1);
        let b = random(2, 6, 2);
        let w = a.dot(&b);
        let f = svd_init(&w, 6).unwrap();
        assert!(max_abs_diff(&f.gamma(), &w) < 1e-10);
        let utu = f.u.t().dot(&f.u);
        assert!(max_abs_diff(&utu, &Array2::eye(6)) < 1e-8);
    }

    #[test]
    fn deterministic_and_rank_checked() {
        let w = random(25, 18, 9);
        let a = svd_init(&w, 4).unwrap();
        let b = svd_init(&w, 4).unwrap();
        assert_eq!(a, b);
        assert!(matches!(svd_init(&w, 19), Err(CovmcError::RankTooLarge { .. })));
    }

    #[test]
    fn warm_start_matches_direct() {
        // well separated leading values, as in a low-rank-plus-noise matrix
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = Array2::from_shape_fn((60, 3), |_| rng.gen_range(-3.0..3.0));
        let b = Array2::from_shape_fn((3, 45), |_| rng.gen_range(-3.0..3.0));
        let w = a.dot(&b) + random(60, 45, 22) * 0.3;
        let direct = truncated_svd(&w, 3).unwrap();
        let nudged = &w + &(random(60, 45, 23) * 1e-3);
        let prev = truncated_svd(&nudged, 3).unwrap();
        for start in [prev.v.clone(), Array2::zeros((45, 0))] {
            let warm = truncated_svd_warm(&w, 3, &start).unwrap();
            for s in 0..3 {
                assert_abs_diff_eq!(warm.d[s], direct.d[s], epsilon = 1e-8);
            }
            assert!(max_abs_diff(&warm.reconstruct(3), &direct.reconstruct(3)) < 1e-8);
            assert!(max_abs_diff(&warm.u, &direct.u) < 1e-8);
        }
    }
}
