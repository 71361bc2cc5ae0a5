//! Simulation designs with constant (`Dgp1`) and covariate-dependent
//! (`Dgp2`) observation rates, and the Monte Carlo experiments built on
//! them.
//!
//! Each replicate draws `(X, L, F, eps, mask)` from its own substream; the
//! coefficient matrix comes from a separate stream and stays fixed across
//! the replicates of an experiment.

use std::time::Instant;

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::als::{initialize, iterate, FitConfig};
use crate::bootstrap::{simultaneous_test, ContrastSpec};
use crate::data::{Covariates, MaskedMatrix, ModelState};
use crate::error::{CovmcError, Result};
use crate::inference::{plugin_moments, se_gamma, se_theta};
use crate::linalg::Cholesky;
use crate::pca::iterate_pca;
use crate::propensity::{fit_propensity, sigmoid, AlphaMode, PropensityFit};
use crate::rank::{mse_initial_diagnostic, select_rank_with_basis, RankBasis, RankConfig};
use crate::rng::{correlated_normals, derive_seed, open_uniform, std_normal, substream, Purpose};
use crate::stats::{mean_se, norm_quantile};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dgp", rename_all = "lowercase")]
pub enum DgpKind {
    /// every cell observed with probability `pi`
    Dgp1 { pi: f64 },
    /// `pi_i = sigmoid(log alpha_n + X_i' gamma_1)` with `alpha_n = C n^-1/2 log n`
    Dgp2 { c: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub r: usize,
    pub kind: DgpKind,
    /// coefficients are `N(0, 4 rho^2 I)`
    pub rho: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

pub const GAMMA1: f64 = 0.2;

impl DgpConfig {
    pub fn dgp1(n: usize, m: usize, pi: f64, seed: u64) -> Self {
        Self { n, m, d: 3, r: 3, kind: DgpKind::Dgp1 { pi }, rho: 1.0, noise_sd: 1.0, seed }
    }

    pub fn dgp2(n: usize, m: usize, c: f64, seed: u64) -> Self {
        Self { kind: DgpKind::Dgp2 { c }, ..Self::dgp1(n, m, 1.0, seed) }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            DgpKind::Dgp1 { pi } if !(pi > 0.0 && pi <= 1.0) => {
                return Err(CovmcError::InvalidInput(format!("observation rate {pi} is outside (0, 1]")));
            }
            DgpKind::Dgp2 { c } if !(c > 0.0) => {
                return Err(CovmcError::InvalidInput(format!("rate constant {c} must be positive")));
            }
            _ => {}
        }
        if self.d == 0 || self.r == 0 {
            return Err(CovmcError::InvalidInput("d and r must be positive".into()));
        }
        if self.n < self.d + self.r || self.m < self.d + self.r {
            return Err(CovmcError::InvalidInput("n and m must be at least d + r".into()));
        }
        if !(self.rho >= 0.0) || !(self.noise_sd >= 0.0) {
            return Err(CovmcError::InvalidInput("rho and noise_sd must be non-negative".into()));
        }
        Ok(())
    }

    /// `alpha_n = C n^-1/2 log n` for `Dgp2`, `pi` for `Dgp1`.
    pub fn alpha_n(&self) -> f64 {
        match self.kind {
            DgpKind::Dgp1 { pi } => pi,
            DgpKind::Dgp2 { c } => c * (self.n as f64).ln() / (self.n as f64).sqrt(),
        }
    }

    /// Observation-rate estimator matching the design.
    pub fn alpha_mode(&self) -> AlphaMode {
        match self.kind {
            DgpKind::Dgp1 { .. } => AlphaMode::Constant,
            DgpKind::Dgp2 { .. } => AlphaMode::Covariate,
        }
    }
}

/// `Sigma_kk' = base^|k - k'|`
pub fn toeplitz(k: usize, base: f64) -> Array2<f64> {
    Array2::from_shape_fn((k, k), |(a, b)| base.powi((a as i32 - b as i32).abs()))
}

fn chol_lower(sigma: &Array2<f64>) -> Array2<f64> {
    Cholesky::factor(sigma.view()).expect("positive definite design covariance").lower().to_owned()
}

#[derive(Debug, Clone)]
pub struct DgpDraw {
    pub y: MaskedMatrix,
    pub x: Covariates,
    pub truth: ModelState,
    pub pi_true: Array1<f64>,
}

/// Coefficients `beta_j ~ N(0, 4 rho^2 I)` from the coefficient stream.
pub fn draw_beta(cfg: &DgpConfig, stream: u64) -> Array2<f64> {
    let mut rng = substream(cfg.seed, Purpose::Coefficients, stream);
    Array2::from_shape_simple_fn((cfg.m, cfg.d), || 2.0 * cfg.rho * std_normal(&mut rng))
}

/// Replicate `rep` of the design with the given coefficients.
pub fn gen_dgp_with_beta(cfg: &DgpConfig, beta: &Array2<f64>, rep: u64) -> Result<DgpDraw> {
    cfg.validate()?;
    let (n, m, d, r) = (cfg.n, cfg.m, cfg.d, cfg.r);
    let mut rng = substream(cfg.seed, Purpose::Replicate, rep);
    let xm = correlated_normals(&mut rng, n, &chol_lower(&toeplitz(d, 0.5)));
    let l = correlated_normals(&mut rng, n, &chol_lower(&toeplitz(r, 0.5)));
    let f = correlated_normals(&mut rng, m, &(chol_lower(&toeplitz(r, 0.2)) * 2.0));

    let pi_true: Array1<f64> = match cfg.kind {
        DgpKind::Dgp1 { pi } => Array1::from_elem(n, pi),
        DgpKind::Dgp2 { .. } => {
            let offset = cfg.alpha_n().ln();
            xm.rows().into_iter().map(|row| sigmoid(offset + GAMMA1 * row.sum())).collect()
        }
    };
    let truth = ModelState::new(beta.clone(), l, f)?;
    let mut values = xm.dot(&beta.t()) + truth.gamma();
    let mut observed = Array2::from_elem((n, m), false);
    for i in 0..n {
        for j in 0..m {
            observed[[i, j]] = open_uniform(&mut rng) < pi_true[i];
            values[[i, j]] += cfg.noise_sd * std_normal(&mut rng);
        }
    }
    Ok(DgpDraw {
        y: MaskedMatrix::from_dense(values, &observed)?,
        x: Covariates::new(xm, false)?,
        truth,
        pi_true,
    })
}

pub fn gen_dgp(cfg: &DgpConfig, rep: u64) -> Result<DgpDraw> {
    gen_dgp_with_beta(cfg, &draw_beta(cfg, 0), rep)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    InitOnly,
    Ls(usize),
    LsConverged,
    Pca(usize),
    PcaConverged,
}

impl Method {
    pub fn label(&self) -> String {
        match self {
            Method::InitOnly => "init".into(),
            Method::Ls(g) => format!("ls{g}"),
            Method::LsConverged => "ls_c".into(),
            Method::Pca(g) => format!("pca{g}"),
            Method::PcaConverged => "pca_c".into(),
        }
    }

    /// Iteration settings; `InitOnly` maps to zero steps.
    pub fn fit_config(&self, rank: usize) -> FitConfig {
        match *self {
            Method::InitOnly => FitConfig::steps(rank, 0),
            Method::Ls(g) | Method::Pca(g) => FitConfig::steps(rank, g),
            Method::LsConverged | Method::PcaConverged => FitConfig::converged(rank),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let bad = || CovmcError::InvalidInput(format!("unknown method '{s}'"));
        match s {
            "init" => Ok(Method::InitOnly),
            "ls_c" => Ok(Method::LsConverged),
            "pca_c" => Ok(Method::PcaConverged),
            _ if s.starts_with("ls") => s[2..].parse().map(Method::Ls).map_err(|_| bad()),
            _ if s.starts_with("pca") => s[3..].parse().map(Method::Pca).map_err(|_| bad()),
            _ => Err(bad()),
        }
    }
}

/// Settings shared by the experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOptions {
    pub replicates: usize,
    pub steps: usize,
    pub level: f64,
    pub max_rank: usize,
    pub bootstrap_replicates: usize,
    pub alpha: f64,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        Self { replicates: 100, steps: 3, level: 0.95, max_rank: 10, bootstrap_replicates: 500, alpha: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRecord {
    pub method: Method,
    pub mse_beta: f64,
    pub mse_gamma: f64,
    pub iterations: usize,
    pub converged: bool,
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseRecord {
    pub replicate: usize,
    pub methods: Vec<MethodRecord>,
}

impl MseRecord {
    pub fn get(&self, method: Method) -> Option<&MethodRecord> {
        self.methods.iter().find(|r| r.method == method)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetRecord {
    pub i: usize,
    pub j: usize,
    pub gamma_est: f64,
    pub gamma_true: f64,
    pub gamma_se: f64,
    pub theta_est: f64,
    pub theta_true: f64,
    pub theta_se: f64,
}

impl TargetRecord {
    pub fn gamma_z(&self) -> f64 {
        (self.gamma_est - self.gamma_true) / self.gamma_se
    }

    pub fn theta_z(&self) -> f64 {
        (self.theta_est - self.theta_true) / self.theta_se
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRecord {
    pub replicate: usize,
    pub targets: Vec<TargetRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionRecord {
    pub replicate: usize,
    pub rho: f64,
    pub t: f64,
    pub quantile: f64,
    pub p_value: f64,
    pub reject: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRecord {
    pub replicate: usize,
    pub r_hat: usize,
    pub alpha_hat: f64,
    /// `mse(k, g)` for `k = 1..`
    pub mse_kg: Vec<f64>,
    pub eic: Vec<f64>,
    /// initial-estimate curve for `k = 0..`
    pub mse_initial: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", content = "records", rename_all = "lowercase")]
pub enum Records {
    Mse(Vec<MseRecord>),
    Coverage(Vec<CoverageRecord>),
    Rejection(Vec<RejectionRecord>),
    Rank(Vec<RankRecord>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub replicate: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub name: String,
    pub mean: f64,
    /// Monte Carlo standard error of the mean
    pub se: f64,
    pub count: usize,
}

impl Aggregate {
    pub fn of(name: impl Into<String>, values: &[f64]) -> Self {
        let (mean, se) = mean_se(values);
        Self { name: name.into(), mean, se, count: values.len() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config: DgpConfig,
    pub options: ExperimentOptions,
    pub replicates: usize,
    pub failures: Vec<Failure>,
    pub aggregates: Vec<Aggregate>,
    pub records: Records,
}

impl ExperimentResult {
    pub fn aggregate(&self, name: &str) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.name == name)
    }

    /// Per-replicate wall times in seconds, one row per (replicate, label).
    pub fn timings(&self) -> Vec<(usize, String, f64)> {
        match &self.records {
            Records::Mse(recs) => recs
                .iter()
                .flat_map(|r| r.methods.iter().map(move |m| (r.replicate, m.method.label(), m.seconds)))
                .collect(),
            _ => Vec::new(),
        }
    }
}

/// Runs `f` on every replicate in parallel and splits successes from
/// failures, keeping replicate order.
fn run_replicates<T: Send>(replicates: usize, f: impl Fn(usize) -> Result<T> + Sync) -> (Vec<T>, Vec<Failure>) {
    let results: Vec<Result<T>> = (0..replicates).into_par_iter().map(&f).collect();
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for (rep, res) in results.into_iter().enumerate() {
        match res {
            Ok(v) => ok.push(v),
            Err(e) => failures.push(Failure { replicate: rep, message: e.to_string() }),
        }
    }
    (ok, failures)
}

fn sq_dist(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

fn fit_observation_model(draw: &DgpDraw, cfg: &DgpConfig) -> Result<PropensityFit> {
    Ok(fit_propensity(&draw.y, &draw.x)?.with_alpha_mode(cfg.alpha_mode()))
}

/// Entrywise MSE of `beta` and `Gamma` for each method, from a shared start.
pub fn run_mse_experiment(cfg: &DgpConfig, opts: &ExperimentOptions, methods: &[Method]) -> Result<ExperimentResult> {
    cfg.validate()?;
    let beta = draw_beta(cfg, 0);
    let (records, failures) = run_replicates(opts.replicates, |rep| {
        let draw = gen_dgp_with_beta(cfg, &beta, rep as u64)?;
        let prop = fit_observation_model(&draw, cfg)?;
        let t0 = Instant::now();
        let init = initialize(&draw.y, &draw.x, &prop, cfg.r)?;
        let init_seconds = t0.elapsed().as_secs_f64();
        let truth_gamma = draw.truth.gamma();
        let score = |method: Method, state: &ModelState, iterations: usize, converged: bool, seconds: f64| MethodRecord {
            method,
            mse_beta: sq_dist(&state.beta, &draw.truth.beta),
            mse_gamma: sq_dist(&state.gamma(), &truth_gamma),
            iterations,
            converged,
            seconds,
        };
        let mut out = Vec::with_capacity(methods.len());
        for &method in methods {
            let t0 = Instant::now();
            let rec = match method {
                Method::InitOnly => score(method, &init.state(), 0, false, init_seconds),
                Method::Ls(_) | Method::LsConverged => {
                    let fc = method.fit_config(cfg.r);
                    let (state, trace) = iterate(init.state(), &draw.y, &draw.x, &fc)?;
                    score(method, &state, trace.steps_taken, trace.converged, init_seconds + t0.elapsed().as_secs_f64())
                }
                Method::Pca(_) | Method::PcaConverged => {
                    let fc = method.fit_config(cfg.r);
                    let (state, trace) = iterate_pca(init.state(), &draw.y, &draw.x, &fc)?;
                    score(method, &state, trace.steps_taken, trace.converged, init_seconds + t0.elapsed().as_secs_f64())
                }
            };
            out.push(rec);
        }
        Ok(MseRecord { replicate: rep, methods: out })
    });

    let mut aggregates = Vec::new();
    for &method in methods {
        let pick = |f: &dyn Fn(&MethodRecord) -> f64| -> Vec<f64> {
            records.iter().filter_map(|r| r.get(method)).map(f).collect()
        };
        let label = method.label();
        aggregates.push(Aggregate::of(format!("mse_beta[{label}]"), &pick(&|r| r.mse_beta)));
        aggregates.push(Aggregate::of(format!("mse_gamma[{label}]"), &pick(&|r| r.mse_gamma)));
        aggregates.push(Aggregate::of(format!("iterations[{label}]"), &pick(&|r| r.iterations as f64)));
    }
    Ok(ExperimentResult {
        config: *cfg,
        options: opts.clone(),
        replicates: opts.replicates,
        failures,
        aggregates,
        records: Records::Mse(records),
    })
}

/// Bias and interval coverage for `Gamma_ij` and `Theta_ij` at the given
/// cells, using the `g`-step least-squares fit at the true rank.
pub fn run_coverage_experiment(
    cfg: &DgpConfig,
    opts: &ExperimentOptions,
    targets: &[(usize, usize)],
) -> Result<ExperimentResult> {
    cfg.validate()?;
    if let Some(&(i, j)) = targets.iter().find(|&&(i, j)| i >= cfg.n || j >= cfg.m) {
        return Err(CovmcError::IndexOutOfRange { row: i, col: j, n: cfg.n, m: cfg.m });
    }
    let beta = draw_beta(cfg, 0);
    let (records, failures) = run_replicates(opts.replicates, |rep| {
        let draw = gen_dgp_with_beta(cfg, &beta, rep as u64)?;
        let prop = fit_observation_model(&draw, cfg)?;
        let init = initialize(&draw.y, &draw.x, &prop, cfg.r)?;
        let (state, _) = iterate(init.state(), &draw.y, &draw.x, &FitConfig::steps(cfg.r, opts.steps))?;
        let mom = plugin_moments(&state, &draw.y, &draw.x, &prop)?;
        let mut out = Vec::with_capacity(targets.len());
        for &(i, j) in targets {
            out.push(TargetRecord {
                i,
                j,
                gamma_est: state.gamma_at(i, j),
                gamma_true: draw.truth.gamma_at(i, j),
                gamma_se: se_gamma(i, j, &state, &draw.x, &mom, &prop)?,
                theta_est: state.theta_at(&draw.x, i, j),
                theta_true: draw.truth.theta_at(&draw.x, i, j),
                theta_se: se_theta(i, j, &state, &draw.x, &mom, &prop)?,
            });
        }
        Ok(CoverageRecord { replicate: rep, targets: out })
    });

    let z = norm_quantile(0.5 + opts.level / 2.0);
    let mut aggregates = Vec::new();
    for (t, &(i, j)) in targets.iter().enumerate() {
        let col = |f: &dyn Fn(&TargetRecord) -> f64| -> Vec<f64> { records.iter().map(|r| f(&r.targets[t])).collect() };
        let hit = |v: f64| if v.abs() <= z { 1.0 } else { 0.0 };
        aggregates.push(Aggregate::of(format!("coverage_gamma[{i},{j}]"), &col(&|r| hit(r.gamma_z()))));
        aggregates.push(Aggregate::of(format!("coverage_theta[{i},{j}]"), &col(&|r| hit(r.theta_z()))));
        aggregates.push(Aggregate::of(format!("bias_gamma[{i},{j}]"), &col(&|r| r.gamma_est - r.gamma_true)));
        aggregates.push(Aggregate::of(format!("bias_theta[{i},{j}]"), &col(&|r| r.theta_est - r.theta_true)));
    }
    Ok(ExperimentResult {
        config: *cfg,
        options: opts.clone(),
        replicates: opts.replicates,
        failures,
        aggregates,
        records: Records::Coverage(records),
    })
}

/// The power grid `rho in {0, e^-3, e^-2.5, e^-2, e^-1.5, e^-1}`.
pub fn default_rho_grid() -> Vec<f64> {
    let mut grid = vec![0.0];
    grid.extend([-3.0f64, -2.5, -2.0, -1.5, -1.0].iter().map(|e| e.exp()));
    grid
}

/// Rejection rates of the bootstrap test of `H0: beta_j = 0` for all `j`,
/// with coefficients drawn at scale `rho` (once per grid point).
pub fn run_rejection_experiment(cfg: &DgpConfig, opts: &ExperimentOptions, rho_grid: &[f64]) -> Result<ExperimentResult> {
    cfg.validate()?;
    let spec = ContrastSpec::all_zero(cfg.m, cfg.d);
    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut aggregates = Vec::new();
    for (g, &rho) in rho_grid.iter().enumerate() {
        let at = DgpConfig { rho, ..*cfg };
        at.validate()?;
        let beta = draw_beta(&at, g as u64);
        let (recs, fails) = run_replicates(opts.replicates, |rep| {
            let draw = gen_dgp_with_beta(&at, &beta, rep as u64)?;
            let prop = fit_observation_model(&draw, &at)?;
            let init = initialize(&draw.y, &draw.x, &prop, at.r)?;
            let (state, _) = iterate(init.state(), &draw.y, &draw.x, &FitConfig::steps(at.r, opts.steps))?;
            let boot_seed = derive_seed(at.seed, Purpose::Bootstrap, rep as u64);
            let res = simultaneous_test(&state, &draw.y, &draw.x, &prop, &spec, opts.bootstrap_replicates, opts.alpha, boot_seed)?;
            Ok(RejectionRecord { replicate: rep, rho, t: res.t, quantile: res.quantile, p_value: res.p_value, reject: res.reject })
        });
        let flags: Vec<f64> = recs.iter().map(|r| if r.reject { 1.0 } else { 0.0 }).collect();
        aggregates.push(Aggregate::of(format!("rejection_rate[rho={rho:.6}]"), &flags));
        failures.extend(fails);
        records.extend(recs);
    }
    Ok(ExperimentResult {
        config: *cfg,
        options: opts.clone(),
        replicates: opts.replicates,
        failures,
        aggregates,
        records: Records::Rejection(records),
    })
}

/// Rank selection accuracy, with the iterated and initial-estimate MSE
/// curves kept for each replicate.
pub fn run_rank_experiment(cfg: &DgpConfig, opts: &ExperimentOptions) -> Result<ExperimentResult> {
    cfg.validate()?;
    let beta = draw_beta(cfg, 0);
    let rank_cfg = RankConfig { max_rank: opts.max_rank, steps: opts.steps, alpha_mode: Some(cfg.alpha_mode()), ..Default::default() };
    let (records, failures) = run_replicates(opts.replicates, |rep| {
        let draw = gen_dgp_with_beta(cfg, &beta, rep as u64)?;
        let prop = fit_observation_model(&draw, cfg)?;
        let basis = RankBasis::new(&draw.y, &draw.x, &prop, opts.max_rank)?;
        let sel = select_rank_with_basis(&draw.y, &draw.x, &prop, &basis, &rank_cfg)?;
        let mse_initial = mse_initial_diagnostic(&draw.y, &draw.x, &basis, &prop, opts.max_rank);
        Ok(RankRecord {
            replicate: rep,
            r_hat: sel.r_hat,
            alpha_hat: sel.alpha_hat,
            mse_kg: sel.mse_kg,
            eic: sel.eic,
            mse_initial,
        })
    });
    let hits: Vec<f64> = records.iter().map(|r| if r.r_hat == cfg.r { 1.0 } else { 0.0 }).collect();
    let r_hat: Vec<f64> = records.iter().map(|r| r.r_hat as f64).collect();
    let aggregates = vec![Aggregate::of("rank_accuracy", &hits), Aggregate::of("r_hat", &r_hat)];
    Ok(ExperimentResult {
        config: *cfg,
        options: opts.clone(),
        replicates: opts.replicates,
        failures,
        aggregates,
        records: Records::Rank(records),
    })
}

/// Iterations and wall time to convergence for least squares and PCA.
pub fn run_timing_experiment(cfg: &DgpConfig, opts: &ExperimentOptions) -> Result<ExperimentResult> {
    run_mse_experiment(cfg, opts, &[Method::LsConverged, Method::PcaConverged])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn full_observation_and_observed_fraction() {
        let full = gen_dgp(&DgpConfig::dgp1(20, 15, 1.0, 1), 0).unwrap();
        assert_eq!(full.y.total_observed(), 300);
        let half = gen_dgp(&DgpConfig::dgp1(500, 500, 0.5, 2), 0).unwrap();
        // binomial sd is 0.001, so 0.01 is ten standard deviations
        assert!((half.y.observed_fraction() - 0.5).abs() < 0.01);
    }

    #[test]
    fn covariate_covariance_matches_design() {
        let draw = gen_dgp(&DgpConfig::dgp1(10_000, 6, 1.0, 3), 0).unwrap();
        let x = draw.x.matrix();
        let cov = x.t().dot(x) / 10_000.0;
        let target = toeplitz(3, 0.5);
        for (a, b) in cov.iter().zip(target.iter()) {
            assert!((a - b).abs() < 0.05, "{a} vs {b}");
        }
    }

    #[test]
    fn coefficients_fixed_across_replicates_and_reproducible() {
        let cfg = DgpConfig::dgp2(40, 30, 2.0, 4);
        let a = gen_dgp(&cfg, 0).unwrap();
        let b = gen_dgp(&cfg, 1).unwrap();
        let a2 = gen_dgp(&cfg, 0).unwrap();
        assert_eq!(a.truth.beta, b.truth.beta);
        assert_ne!(a.truth.l, b.truth.l);
        assert_eq!(a.y, a2.y);
        assert_eq!(a.truth, a2.truth);
        let alpha = 2.0 * 40f64.ln() / 40f64.sqrt();
        for i in 0..40 {
            let expect = sigmoid(alpha.ln() + GAMMA1 * a.x.row(i).sum());
            assert_abs_diff_eq!(a.pi_true[i], expect, epsilon = 1e-15);
        }
    }

    #[test]
    fn noiseless_full_observation_recovers_mean() {
        // Gamma and beta are only identified up to L -> L - X A', so compare Theta
        let cfg = DgpConfig { noise_sd: 0.0, ..DgpConfig::dgp1(30, 30, 1.0, 5) };
        let draw = gen_dgp(&cfg, 0).unwrap();
        // pi = 1 separates the logistic fit, so fix the propensity directly
        let prop = PropensityFit::fixed(Array1::ones(30)).unwrap();
        let init = initialize(&draw.y, &draw.x, &prop, 3).unwrap();
        let theta = draw.truth.theta(&draw.x);
        let (ls, _) = iterate(init.state(), &draw.y, &draw.x, &FitConfig::steps(3, 3)).unwrap();
        assert!(sq_dist(&ls.theta(&draw.x), &theta) < 1e-20);
        let (pca, _) = iterate_pca(init.state(), &draw.y, &draw.x, &FitConfig::converged(3)).unwrap();
        assert!(sq_dist(&pca.theta(&draw.x), &theta) < 1e-12);
    }

    #[test]
    fn experiments_are_deterministic_and_aggregate_records() {
        let cfg = DgpConfig::dgp1(40, 40, 0.6, 6);
        let opts = ExperimentOptions { replicates: 4, max_rank: 5, ..Default::default() };
        let a = run_mse_experiment(&cfg, &opts, &[Method::InitOnly, Method::Ls(3), Method::PcaConverged]).unwrap();
        let b = run_mse_experiment(&cfg, &opts, &[Method::InitOnly, Method::Ls(3), Method::PcaConverged]).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let Records::Mse(recs) = &a.records else { panic!() };
        let mean: f64 = recs.iter().map(|r| r.get(Method::Ls(3)).unwrap().mse_gamma).sum::<f64>() / recs.len() as f64;
        assert_abs_diff_eq!(a.aggregate("mse_gamma[ls3]").unwrap().mean, mean, epsilon = 1e-15);
        assert_eq!(a.aggregate("mse_gamma[ls3]").unwrap().count, 4 - a.failures.len());

        let rank = run_rank_experiment(&cfg, &opts).unwrap();
        let Records::Rank(rr) = &rank.records else { panic!() };
        assert!(rr.iter().all(|r| r.mse_kg.len() == 5 && r.mse_initial.len() == 6));
    }

    #[test]
    fn single_replicate_rejection_rate_is_zero_or_one() {
        let cfg = DgpConfig::dgp2(60, 40, 2.0, 7);
        let opts = ExperimentOptions { replicates: 1, bootstrap_replicates: 200, ..Default::default() };
        let res = run_rejection_experiment(&cfg, &opts, &[0.0]).unwrap();
        let rate = res.aggregates[0].mean;
        assert!(rate == 0.0 || rate == 1.0);
    }

    #[test]
    fn method_labels_round_trip() {
        for m in [Method::InitOnly, Method::Ls(3), Method::LsConverged, Method::Pca(2), Method::PcaConverged] {
            assert_eq!(Method::parse(&m.label()).unwrap(), m);
        }
        assert!(Method::parse("svd").is_err());
    }
}
