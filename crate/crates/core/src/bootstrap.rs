//! Gaussian multiplier bootstrap for `H0: A_j beta_j = a0_j` for all `j` in
//! a column group.
//!
//! `T = max_j |A_j beta_j - a0_j|_inf` is compared with the bootstrap law of
//! `T* = max_j |n^-1 sum_i iota_i A_j omega_ij|_inf`, where
//! `omega_ij = M_X^-1 X_i (xi_ij e_ij + pi_i Gamma_ij)` and the `iota_i` are
//! i.i.d. standard normal.

use ndarray::{s, Array1, Array2, Array3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::als::observed_residuals;
use crate::data::{check_dims, Covariates, MaskedMatrix, ModelState};
use crate::error::{CovmcError, Result};
use crate::inference::MAX_MOMENT_CONDITION;
use crate::linalg::spd_inverse;
use crate::propensity::PropensityFit;
use crate::rng::{std_normal, substream, Purpose};

pub const DEFAULT_REPLICATES: usize = 1000;
pub const MIN_REPLICATES: usize = 100;
/// Multiplier draws are generated this many replicates at a time.
const CHUNK: usize = 128;

/// Contrasts `A_j` (`q x d`) and targets `a0_j` for a group of columns.
/// Either may be shared across the group (one entry) or given per column.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastSpec {
    pub group: Vec<usize>,
    a: Vec<Array2<f64>>,
    a0: Vec<Array1<f64>>,
}

impl ContrastSpec {
    pub fn new(group: Vec<usize>, a: Vec<Array2<f64>>, a0: Vec<Array1<f64>>) -> Result<Self> {
        if group.is_empty() {
            return Err(CovmcError::EmptyGroup);
        }
        let per = |len: usize, what: &str| {
            if len == 1 || len == group.len() {
                Ok(())
            } else {
                Err(CovmcError::InvalidInput(format!(
                    "{len} {what} entries for a group of {} columns",
                    group.len()
                )))
            }
        };
        per(a.len(), "contrast")?;
        per(a0.len(), "target")?;
        let (q, d) = a[0].dim();
        if q == 0 || q > d {
            return Err(CovmcError::InvalidInput(format!("contrast shape {q}x{d} needs 1 <= q <= d")));
        }
        for m in &a {
            if m.dim() != (q, d) {
                return Err(CovmcError::DimensionMismatch("contrasts differ in shape".into()));
            }
            if m.iter().all(|&v| v == 0.0) {
                return Err(CovmcError::InvalidInput("contrast matrix is zero".into()));
            }
        }
        if a0.iter().any(|v| v.len() != q) {
            return Err(CovmcError::DimensionMismatch(format!("targets must have length {q}")));
        }
        Ok(Self { group, a, a0 })
    }

    /// `H0: beta_j = 0` for every column.
    pub fn all_zero(m: usize, d: usize) -> Self {
        Self::new((0..m).collect(), vec![Array2::eye(d)], vec![Array1::zeros(d)]).expect("valid")
    }

    /// `H0: beta_{j,p} = 0` for every column.
    pub fn coefficient_zero(m: usize, d: usize, p: usize) -> Result<Self> {
        if p >= d {
            return Err(CovmcError::InvalidInput(format!("coefficient {p} out of range for d = {d}")));
        }
        let mut a = Array2::zeros((1, d));
        a[[0, p]] = 1.0;
        Self::new((0..m).collect(), vec![a], vec![Array1::zeros(1)])
    }

    /// `H0: beta_{j,p} - beta_{j,p2} = 0` for every column.
    pub fn pairwise(m: usize, d: usize, p: usize, p2: usize) -> Result<Self> {
        if p >= d || p2 >= d || p == p2 {
            return Err(CovmcError::InvalidInput(format!("invalid coefficient pair ({p}, {p2})")));
        }
        let mut a = Array2::zeros((1, d));
        a[[0, p]] = 1.0;
        a[[0, p2]] = -1.0;
        Self::new((0..m).collect(), vec![a], vec![Array1::zeros(1)])
    }

    pub fn q(&self) -> usize {
        self.a[0].nrows()
    }

    pub fn d(&self) -> usize {
        self.a[0].ncols()
    }

    /// Contrast for the `t`-th member of the group.
    pub fn a_at(&self, t: usize) -> &Array2<f64> {
        &self.a[if self.a.len() == 1 { 0 } else { t }]
    }

    pub fn a0_at(&self, t: usize) -> &Array1<f64> {
        &self.a0[if self.a0.len() == 1 { 0 } else { t }]
    }

    /// Same hypothesis with every `A_j` and `a0_j` multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            group: self.group.clone(),
            a: self.a.iter().map(|a| a * c).collect(),
            a0: self.a0.iter().map(|v| v * c).collect(),
        }
    }

    pub fn with_a0(&self, a0: Vec<Array1<f64>>) -> Result<Self> {
        Self::new(self.group.clone(), self.a.clone(), a0)
    }

    fn check(&self, m: usize, d: usize) -> Result<()> {
        if self.d() != d {
            return Err(CovmcError::DimensionMismatch(format!(
                "contrasts have {} columns but the model has d = {d}",
                self.d()
            )));
        }
        if let Some(&j) = self.group.iter().find(|&&j| j >= m) {
            return Err(CovmcError::InvalidInput(format!("group column {j} out of range for m = {m}")));
        }
        Ok(())
    }

    pub fn from_json(text: &str, m: usize) -> Result<Self> {
        let raw: ContrastJson = serde_json::from_str(text)?;
        raw.into_spec(m)
    }

    pub fn to_json(&self) -> String {
        let matrix = |a: &Array2<f64>| a.outer_iter().map(|r| r.to_vec()).collect::<Vec<_>>();
        let raw = ContrastJson {
            group: Some(self.group.clone()),
            a: if self.a.len() == 1 {
                MatrixOrStack::Shared(matrix(&self.a[0]))
            } else {
                MatrixOrStack::PerColumn(self.a.iter().map(matrix).collect())
            },
            a0: Some(if self.a0.len() == 1 {
                VectorOrStack::Shared(self.a0[0].to_vec())
            } else {
                VectorOrStack::PerColumn(self.a0.iter().map(|v| v.to_vec()).collect())
            }),
        };
        serde_json::to_string_pretty(&raw).expect("serializable")
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum MatrixOrStack {
    Shared(Vec<Vec<f64>>),
    PerColumn(Vec<Vec<Vec<f64>>>),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum VectorOrStack {
    Shared(Vec<f64>),
    PerColumn(Vec<Vec<f64>>),
}

/// On-disk form: `{"group": [...], "A": [[...]] | [[[...]]], "a0": [...] | [[...]]}`.
/// A missing group means every column; a missing `a0` means zeros.
#[derive(Debug, Serialize, Deserialize)]
struct ContrastJson {
    #[serde(default)]
    group: Option<Vec<usize>>,
    #[serde(rename = "A")]
    a: MatrixOrStack,
    #[serde(default)]
    a0: Option<VectorOrStack>,
}

fn to_matrix(rows: Vec<Vec<f64>>) -> Result<Array2<f64>> {
    let q = rows.len();
    let d = rows.first().map_or(0, |r| r.len());
    if q == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(CovmcError::InvalidInput("contrast rows must be non-empty and equal length".into()));
    }
    Ok(Array2::from_shape_vec((q, d), rows.into_iter().flatten().collect()).expect("checked shape"))
}

impl ContrastJson {
    fn into_spec(self, m: usize) -> Result<ContrastSpec> {
        let group = self.group.unwrap_or_else(|| (0..m).collect());
        let a = match self.a {
            MatrixOrStack::Shared(rows) => vec![to_matrix(rows)?],
            MatrixOrStack::PerColumn(stack) => stack.into_iter().map(to_matrix).collect::<Result<_>>()?,
        };
        let q = a.first().map_or(0, |a| a.nrows());
        let a0 = match self.a0 {
            None => vec![Array1::zeros(q)],
            Some(VectorOrStack::Shared(v)) => vec![Array1::from(v)],
            Some(VectorOrStack::PerColumn(vs)) => vs.into_iter().map(Array1::from).collect(),
        };
        ContrastSpec::new(group, a, a0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub t: f64,
    pub t_star: Vec<f64>,
    pub quantile: f64,
    pub p_value: f64,
    pub reject: bool,
    pub replicates: usize,
    pub alpha: f64,
    pub seed: u64,
}

/// `xi_ij e_ij + pi_i Gamma_ij`, the scalar part of each influence vector.
fn influence_weights(state: &ModelState, y: &MaskedMatrix, x: &Covariates, prop: &PropensityFit) -> Array2<f64> {
    let mut c = observed_residuals(state, y, x);
    let gamma = state.gamma();
    for (i, mut row) in c.axis_iter_mut(Axis(0)).enumerate() {
        row.scaled_add(prop.pi_hat[i], &gamma.row(i));
    }
    c
}

fn m_x_inverse(x: &Covariates, prop: &PropensityFit) -> Result<Array2<f64>> {
    let n = x.nrows();
    let weighted = x.matrix() * &prop.pi_hat.view().insert_axis(Axis(1));
    let m_x = weighted.t().dot(x.matrix()) / n as f64;
    spd_inverse(m_x.view(), MAX_MOMENT_CONDITION)
        .ok_or_else(|| CovmcError::DegenerateMoments("M_X is singular".into()))
}

/// Influence vectors `omega_ij`, laid out as `m x n x d`.
pub fn omega_hat(state: &ModelState, y: &MaskedMatrix, x: &Covariates, prop: &PropensityFit) -> Result<Array3<f64>> {
    check_dims(y, x)?;
    let (n, m, d) = (y.nrows(), y.ncols(), x.dim());
    let m_x_inv = m_x_inverse(x, prop)?;
    let base = x.matrix().dot(&m_x_inv); // row i is (M_X^-1 X_i)'
    let c = influence_weights(state, y, x, prop);
    let mut out = Array3::zeros((m, n, d));
    out.axis_iter_mut(Axis(0)).into_par_iter().enumerate().for_each(|(j, mut slab)| {
        for i in 0..n {
            slab.row_mut(i).assign(&(&base.row(i) * c[[i, j]]));
        }
    });
    Ok(out)
}

/// `n x (|G| q)` matrix whose column `(t, s)` holds `(A_{j_t} omega_{i j_t})_s`.
fn projected_influence(omega: &Array3<f64>, spec: &ContrastSpec) -> Array2<f64> {
    let n = omega.shape()[1];
    let q = spec.q();
    let mut v = Array2::zeros((n, spec.group.len() * q));
    for (t, &j) in spec.group.iter().enumerate() {
        let proj = omega.index_axis(Axis(0), j).dot(&spec.a_at(t).t());
        v.slice_mut(s![.., t * q..(t + 1) * q]).assign(&proj);
    }
    v
}

/// `T = max_{j in G} |A_j beta_j - a0_j|_inf`.
pub fn t_stat(state: &ModelState, spec: &ContrastSpec) -> Result<f64> {
    if spec.group.is_empty() {
        return Err(CovmcError::EmptyGroup);
    }
    spec.check(state.beta.nrows(), state.beta.ncols())?;
    let mut t = 0.0f64;
    for (k, &j) in spec.group.iter().enumerate() {
        let diff = spec.a_at(k).dot(&state.beta.row(j)) - spec.a0_at(k);
        t = diff.iter().fold(t, |acc, v| acc.max(v.abs()));
    }
    Ok(t)
}

/// Bootstrap draws `T*_1, ..., T*_B`. Replicate `b` takes its multipliers
/// from its own substream, so the draws do not depend on scheduling.
pub fn bootstrap_samples(omega: &Array3<f64>, spec: &ContrastSpec, replicates: usize, seed: u64) -> Result<Vec<f64>> {
    if spec.group.is_empty() {
        return Err(CovmcError::EmptyGroup);
    }
    let (m, n, d) = omega.dim();
    spec.check(m, d)?;
    let v = projected_influence(omega, spec);
    let starts: Vec<usize> = (0..replicates).step_by(CHUNK).collect();
    let chunks: Vec<Vec<f64>> = starts
        .into_par_iter()
        .map(|start| {
            let rows = CHUNK.min(replicates - start);
            let mut iota = Array2::zeros((rows, n));
            for (r, mut row) in iota.axis_iter_mut(Axis(0)).enumerate() {
                let mut rng = substream(seed, Purpose::Multiplier, (start + r) as u64);
                row.iter_mut().for_each(|z| *z = std_normal(&mut rng));
            }
            let sums = iota.dot(&v) / n as f64;
            sums.outer_iter().map(|row| row.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))).collect()
        })
        .collect();
    Ok(chunks.into_iter().flatten().collect())
}

/// The `ceil((1 - alpha)(B + 1))`-th order statistic; infinite when that
/// index exceeds `B`.
pub fn order_quantile(samples: &[f64], alpha: f64) -> f64 {
    let b = samples.len();
    let k = ((1.0 - alpha) * (b as f64 + 1.0) - 1e-9).ceil() as usize;
    if k == 0 {
        return f64::NEG_INFINITY;
    }
    if k > b {
        return f64::INFINITY;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted[k - 1]
}

/// `(1 + #{T*_b >= T}) / (B + 1)`
pub fn bootstrap_p_value(samples: &[f64], t: f64) -> f64 {
    let exceed = samples.iter().filter(|&&s| s >= t).count();
    (1.0 + exceed as f64) / (samples.len() as f64 + 1.0)
}

fn check_settings(replicates: usize, alpha: f64) -> Result<()> {
    if replicates < MIN_REPLICATES {
        return Err(CovmcError::InvalidInput(format!("need at least {MIN_REPLICATES} bootstrap replicates")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(CovmcError::InvalidInput(format!("alpha {alpha} is outside (0, 1)")));
    }
    Ok(())
}

/// Bootstrap law, quantile and decision for a given statistic `t`.
pub fn bootstrap_quantile(
    omega: &Array3<f64>,
    spec: &ContrastSpec,
    t: f64,
    replicates: usize,
    alpha: f64,
    seed: u64,
) -> Result<BootstrapResult> {
    check_settings(replicates, alpha)?;
    let t_star = bootstrap_samples(omega, spec, replicates, seed)?;
    let quantile = order_quantile(&t_star, alpha);
    Ok(BootstrapResult {
        t,
        p_value: bootstrap_p_value(&t_star, t),
        reject: t > quantile,
        quantile,
        t_star,
        replicates,
        alpha,
        seed,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn simultaneous_test(
    state: &ModelState,
    y: &MaskedMatrix,
    x: &Covariates,
    prop: &PropensityFit,
    spec: &ContrastSpec,
    replicates: usize,
    alpha: f64,
    seed: u64,
) -> Result<BootstrapResult> {
    check_settings(replicates, alpha)?;
    let t = t_stat(state, spec)?;
    let omega = omega_hat(state, y, x, prop)?;
    bootstrap_quantile(&omega, spec, t, replicates, alpha, seed)
}

/// Standard error of `beta_{j,p}` implied by the influence vectors, used to
/// size far alternatives in tests and experiments.
pub fn influence_se(omega: &Array3<f64>, j: usize, p: usize) -> f64 {
    let n = omega.shape()[1] as f64;
    let col = omega.slice(s![j, .., p]);
    (col.dot(&col) / (n * n)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::norm_quantile;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Instance {
        y: MaskedMatrix,
        x: Covariates,
        prop: PropensityFit,
        state: ModelState,
    }

    fn instance(n: usize, m: usize, seed: u64) -> Instance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xm = Array2::from_shape_fn((n, 2), |(_, c)| if c == 0 { 1.0 } else { rng.gen_range(-1.0..1.0) });
        let x = Covariates::new(xm, true).unwrap();
        let state = ModelState::new(
            Array2::from_shape_fn((m, 2), |_| rng.gen_range(-1.0..1.0)),
            Array2::from_shape_fn((n, 1), |_| rng.gen_range(-1.0..1.0)),
            Array2::from_shape_fn((m, 1), |_| rng.gen_range(-1.0..1.0)),
        )
        .unwrap();
        let theta = state.theta(&x);
        let pi: Array1<f64> = (0..n).map(|_| rng.gen_range(0.4..0.9)).collect();
        let mut trip = Vec::new();
        for i in 0..n {
            for j in 0..m {
                if rng.gen_bool(pi[i]) {
                    trip.push((i, j, theta[[i, j]] + rng.gen_range(-1.0..1.0)));
                }
            }
        }
        Instance {
            y: MaskedMatrix::from_triplets(&trip, n, m).unwrap(),
            x,
            prop: PropensityFit::fixed(pi).unwrap(),
            state,
        }
    }

    #[test]
    fn omega_matches_naive_loop() {
        let t = instance(12, 7, 1);
        let omega = omega_hat(&t.state, &t.y, &t.x, &t.prop).unwrap();
        let (n, d) = (12, 2);
        let mut mx = Array2::<f64>::zeros((d, d));
        for i in 0..n {
            for a in 0..d {
                for b in 0..d {
                    mx[[a, b]] += t.prop.pi_hat[i] * t.x.matrix()[[i, a]] * t.x.matrix()[[i, b]] / n as f64;
                }
            }
        }
        let det = mx[[0, 0]] * mx[[1, 1]] - mx[[0, 1]] * mx[[1, 0]];
        let inv = array![[mx[[1, 1]], -mx[[0, 1]]], [-mx[[1, 0]], mx[[0, 0]]]] / det;
        for j in 0..7 {
            for i in 0..n {
                let g = t.state.gamma_at(i, j);
                let e = t.y.get(i, j).map_or(0.0, |v| v - t.state.theta_at(&t.x, i, j));
                let c = e + t.prop.pi_hat[i] * g;
                for a in 0..d {
                    let mut w = 0.0;
                    for b in 0..d {
                        w += inv[[a, b]] * t.x.matrix()[[i, b]];
                    }
                    assert_abs_diff_eq!(omega[[j, i, a]], w * c, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn omega_trivial_cases() {
        let x = Covariates::new(Array2::ones((3, 1)), true).unwrap();
        let state = ModelState::new(array![[1.0], [2.0]], Array2::zeros((3, 1)), Array2::zeros((2, 1))).unwrap();
        let y = MaskedMatrix::from_dense(state.theta(&x), &Array2::from_elem((3, 2), true)).unwrap();
        let prop = PropensityFit::fixed(array![0.2, 0.4, 0.6]).unwrap();
        let omega = omega_hat(&state, &y, &x, &prop).unwrap();
        assert!(omega.iter().all(|&v| v == 0.0));

        let state = ModelState::new(array![[0.0], [0.0]], array![[1.0], [2.0], [-1.0]], array![[0.5], [1.0]]).unwrap();
        let y = MaskedMatrix::from_triplets(&[(0, 0, 3.0), (2, 1, -0.5)], 3, 2).unwrap();
        let omega = omega_hat(&state, &y, &x, &prop).unwrap();
        let pbar = 0.4;
        for j in 0..2 {
            for i in 0..3 {
                let e = y.get(i, j).map_or(0.0, |v| v - state.gamma_at(i, j));
                let expect = (e + prop.pi_hat[i] * state.gamma_at(i, j)) / pbar;
                assert_abs_diff_eq!(omega[[j, i, 0]], expect, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn t_stat_examples() {
        let state = ModelState::new(array![[1.0, -2.0, 0.5], [0.0, 0.0, 0.0]], Array2::zeros((1, 1)), Array2::zeros((2, 1))).unwrap();
        let spec = ContrastSpec::new(vec![0], vec![Array2::eye(3)], vec![Array1::zeros(3)]).unwrap();
        assert_eq!(t_stat(&state, &spec).unwrap(), 2.0);
        let exact = spec.with_a0(vec![array![1.0, -2.0, 0.5]]).unwrap();
        assert_eq!(t_stat(&state, &exact).unwrap(), 0.0);
        let both = ContrastSpec::new(vec![1, 0], vec![Array2::eye(3)], vec![Array1::zeros(3)]).unwrap();
        let flipped = ContrastSpec::new(vec![0, 1], vec![Array2::eye(3)], vec![Array1::zeros(3)]).unwrap();
        assert_eq!(t_stat(&state, &both).unwrap(), t_stat(&state, &flipped).unwrap());
        assert!(matches!(ContrastSpec::new(vec![], vec![Array2::eye(3)], vec![Array1::zeros(3)]), Err(CovmcError::EmptyGroup)));
    }

    #[test]
    fn zero_influence_gives_zero_quantile() {
        let omega = Array3::zeros((3, 10, 2));
        let spec = ContrastSpec::all_zero(3, 2);
        let res = bootstrap_quantile(&omega, &spec, 0.0, 200, 0.05, 1).unwrap();
        assert!(res.t_star.iter().all(|&v| v == 0.0));
        assert_eq!(res.quantile, 0.0);
    }

    #[test]
    fn scalar_contrast_matches_conditional_normal_law() {
        let n = 300;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut omega = Array3::zeros((1, n, 1));
        for i in 0..n {
            omega[[0, i, 0]] = rng.gen_range(-2.0..3.0);
        }
        let spec = ContrastSpec::new(vec![0], vec![array![[1.0]]], vec![array![0.0]]).unwrap();
        let res = bootstrap_quantile(&omega, &spec, 0.0, 20_000, 0.05, 9).unwrap();
        let v = omega.slice(s![0, .., 0]);
        let sd = v.iter().map(|x| x * x).sum::<f64>().sqrt() / n as f64;
        let analytic = sd * norm_quantile(0.975);
        assert!((res.quantile - analytic).abs() <= 0.05 * analytic, "{} vs {analytic}", res.quantile);
        let again = bootstrap_quantile(&omega, &spec, 0.0, 20_000, 0.05, 9).unwrap();
        assert_eq!(res.t_star, again.t_star);
    }

    #[test]
    fn far_alternative_is_rejected_and_scaling_is_equivariant() {
        let t = instance(60, 8, 2);
        let spec = ContrastSpec::new(vec![0], vec![Array2::eye(2)], vec![t.state.beta.row(0).to_owned()]).unwrap();
        let omega = omega_hat(&t.state, &t.y, &t.x, &t.prop).unwrap();
        let se = influence_se(&omega, 0, 0);
        let far = spec.with_a0(vec![spec.a0_at(0) + &array![100.0 * se, 0.0]]).unwrap();
        let res = simultaneous_test(&t.state, &t.y, &t.x, &t.prop, &far, 500, 0.05, 3).unwrap();
        assert!(res.reject);

        let group = ContrastSpec::coefficient_zero(8, 2, 1).unwrap();
        let base = simultaneous_test(&t.state, &t.y, &t.x, &t.prop, &group, 300, 0.05, 4).unwrap();
        let scaled = simultaneous_test(&t.state, &t.y, &t.x, &t.prop, &group.scaled(3.0), 300, 0.05, 4).unwrap();
        assert_abs_diff_eq!(scaled.t, 3.0 * base.t, epsilon = 1e-12);
        for (a, b) in scaled.t_star.iter().zip(base.t_star.iter()) {
            assert_abs_diff_eq!(*a, 3.0 * b, epsilon = 1e-12);
        }
        assert_eq!(scaled.reject, base.reject);
    }

    #[test]
    fn replicate_mean_stabilizes() {
        let t = instance(80, 6, 6);
        let omega = omega_hat(&t.state, &t.y, &t.x, &t.prop).unwrap();
        let spec = ContrastSpec::all_zero(6, 2);
        let draws = bootstrap_samples(&omega, &spec, 10_000, 11).unwrap();
        let (mean, se) = crate::stats::mean_se(&draws);
        assert!(se / mean < 0.02);
    }

    #[test]
    fn json_round_trip_and_forms() {
        let spec = ContrastSpec::pairwise(4, 3, 1, 2).unwrap();
        assert_eq!(ContrastSpec::from_json(&spec.to_json(), 4).unwrap(), spec);
        let per = ContrastSpec::from_json(r#"{"group":[0,2],"A":[[[1,0]],[[0,1]]],"a0":[[0.5],[1.0]]}"#, 3).unwrap();
        assert_eq!(per.a_at(1), &array![[0.0, 1.0]]);
        assert_eq!(per.a0_at(0), &array![0.5]);
        let shared = ContrastSpec::from_json(r#"{"A":[[1,0,0]]}"#, 5).unwrap();
        assert_eq!(shared.group, vec![0, 1, 2, 3, 4]);
        assert_eq!(shared.a0_at(3), &array![0.0]);
        assert!(ContrastSpec::from_json(r#"{"A":[[0,0]]}"#, 2).is_err());
    }

    proptest! {
        #[test]
        fn decision_agrees_with_p_value(samples in prop::collection::vec(0.0f64..10.0, 100..300), t in 0.0f64..10.0, alpha in 0.01f64..0.2) {
            let q = order_quantile(&samples, alpha);
            let p = bootstrap_p_value(&samples, t);
            prop_assert_eq!(t > q, p <= alpha + 1e-12);
            prop_assert!(p > 0.0 && p <= 1.0);
        }
    }
}
