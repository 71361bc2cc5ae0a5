use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use covmc_core::als::{fit_iterative, FitConfig};
use covmc_core::bootstrap::{simultaneous_test, ContrastSpec};
use covmc_core::inference::{infer as infer_target, plugin_moments, InferenceReport, Target};
use covmc_core::io::{
    fmt_f64, read_covariates, read_json, read_triplets, write_covariates, write_json, write_triplet_list, write_triplets,
    FitMethod, Manifest, ModelFile, TraceSummary,
};
use covmc_core::pca::fit_iterative_pca;
use covmc_core::propensity::{fit_propensity, AlphaMode, PropensityFit};
use covmc_core::rank::{mse_initial_diagnostic, select_rank_with_basis, RankBasis, RankConfig};
use covmc_core::ratings::{evaluate, predict_adjusted, RatingsDataset};
use covmc_core::simulate::{
    default_rho_grid, gen_dgp, run_coverage_experiment, run_mse_experiment, run_rank_experiment,
    run_rejection_experiment, run_timing_experiment, Aggregate, DgpConfig, DgpKind, ExperimentOptions,
    ExperimentResult, Failure, Method, Records,
};
use covmc_core::{Covariates, MaskedMatrix};
use ndarray::Array1;
use serde::Serialize;

use crate::{AlphaArg, DataArgs, EvalArgs, ExperimentArg, FitArgs, IngestArgs, InferArgs, MethodArg, RankArgs, SimulateArgs, TestArgs};

/// Flattens command arguments to strings for the manifest.
fn config_map<T: Serialize>(args: &T) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    if let Ok(serde_json::Value::Object(obj)) = serde_json::to_value(args) {
        for (k, v) in obj {
            let s = match v {
                serde_json::Value::Null => continue,
                serde_json::Value::String(s) => s,
                other => other.to_string(),
            };
            out.insert(k, s);
        }
    }
    out
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_manifest<T: Serialize>(dir: &Path, command: &str, args: &T, seed: Option<u64>, outputs: &[&str]) -> Result<()> {
    let mut manifest = Manifest::new(command, config_map(args), seed);
    manifest.outputs = outputs.iter().map(|s| s.to_string()).collect();
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_data(d: &DataArgs) -> Result<(MaskedMatrix, Covariates)> {
    let x = read_covariates(&d.x).with_context(|| format!("reading {}", d.x.display()))?;
    let dims = match (d.n, d.m) {
        (None, None) => Some(x.nrows()).map(|n| (n, 0)),
        (n, m) => Some((n.unwrap_or(x.nrows()), m.unwrap_or(0))),
    };
    // the row count always comes from the covariates; columns from the file
    let probe = read_triplets(&d.y, None).with_context(|| format!("reading {}", d.y.display()))?;
    let (n, m) = dims.map(|(n, m)| (n, m.max(probe.ncols()))).unwrap();
    let y = read_triplets(&d.y, Some((n, m))).with_context(|| format!("reading {}", d.y.display()))?;
    Ok((y, x))
}

fn alpha_mode(arg: AlphaArg, prop: &PropensityFit) -> AlphaMode {
    match arg {
        AlphaArg::Auto => AlphaMode::default_for(prop),
        AlphaArg::Constant => AlphaMode::Constant,
        AlphaArg::Covariate => AlphaMode::Covariate,
    }
}

/// Logistic observation model; a fully observed matrix gets `pi = 1`.
fn observation_model(y: &MaskedMatrix, x: &Covariates, arg: AlphaArg) -> Result<PropensityFit> {
    let prop = if y.total_observed() == y.nrows() * y.ncols() {
        PropensityFit::fixed(Array1::ones(y.nrows()))?
    } else {
        fit_propensity(y, x)?
    };
    let mode = alpha_mode(arg, &prop);
    Ok(prop.with_alpha_mode(mode))
}

pub fn fit(a: &FitArgs) -> Result<()> {
    let (y, x) = load_data(&a.data)?;
    let prop = observation_model(&y, &x, a.alpha_mode)?;
    let rank = match a.rank {
        Some(r) => r,
        None => {
            let cfg = RankConfig { max_rank: a.max_rank, alpha_mode: Some(prop.alpha_mode), ..Default::default() };
            let basis = RankBasis::new(&y, &x, &prop, cfg.max_rank)?;
            select_rank_with_basis(&y, &x, &prop, &basis, &cfg)?.r_hat
        }
    };
    let cfg = if a.converge {
        FitConfig { max_steps: a.max_steps, tol: a.tol, ..FitConfig::converged(rank) }
    } else {
        FitConfig::steps(rank, a.steps)
    };
    let (state, trace, seconds, method) = match a.method {
        MethodArg::Ls => {
            let (s, t) = fit_iterative(&y, &x, &prop, &cfg)?;
            (s, TraceSummary::from(&t), t.seconds_per_step, FitMethod::Ls)
        }
        MethodArg::Pca => {
            let (s, t) = fit_iterative_pca(&y, &x, &prop, &cfg)?;
            (s, TraceSummary::from(&t), t.seconds_per_step, FitMethod::Pca)
        }
    };
    if a.converge && !trace.converged {
        eprintln!("warning: no convergence after {} steps (last change {:e})", trace.steps_taken, trace.delta_inf);
    }
    create_dir(&a.out)?;
    let mut trace_csv = String::from("step,objective,delta\n");
    for (g, (o, d)) in trace.objective_per_step.iter().zip(&trace.delta_history).enumerate() {
        writeln!(trace_csv, "{},{},{}", g + 1, fmt_f64(*o), fmt_f64(*d))?;
    }
    write_text(&a.out.join("trace.csv"), &trace_csv)?;
    let mut timing = String::from("step,seconds\n");
    for (g, s) in seconds.iter().enumerate() {
        writeln!(timing, "{},{}", g + 1, fmt_f64(*s))?;
    }
    write_text(&a.out.join("fit_timing.csv"), &timing)?;
    let model = ModelFile {
        format_version: covmc_core::io::FORMAT_VERSION,
        method,
        rank,
        n: y.nrows(),
        m: y.ncols(),
        d: x.dim(),
        config: config_map(a),
        state,
        propensity: prop,
        trace,
    };
    write_json(&a.out.join("model.json"), &model)?;
    write_manifest(&a.out, "fit", a, None, &["model.json", "trace.csv", "fit_timing.csv"])
}

#[derive(Serialize)]
struct RankReport {
    candidates: Vec<usize>,
    mse: Vec<f64>,
    eic: Vec<f64>,
    h: f64,
    r_hat: usize,
    g: usize,
    alpha_mode: AlphaMode,
    alpha_hat: f64,
    failed: Vec<(usize, String)>,
    /// initial-estimate curve, `k = 0..`
    mse_initial: Vec<f64>,
}

pub fn rank(a: &RankArgs) -> Result<()> {
    let (y, x) = load_data(&a.data)?;
    let prop = observation_model(&y, &x, a.alpha_mode)?;
    let cfg = RankConfig {
        max_rank: a.max_rank,
        steps: a.steps,
        c_h: a.c_h,
        delta_h: a.delta_h,
        alpha_mode: Some(prop.alpha_mode),
    };
    let basis = RankBasis::new(&y, &x, &prop, a.max_rank)?;
    let sel = select_rank_with_basis(&y, &x, &prop, &basis, &cfg)?;
    let mse_initial = mse_initial_diagnostic(&y, &x, &basis, &prop, a.max_rank);
    create_dir(&a.out)?;
    let mut curve = String::from("curve,k,value\n");
    for (t, &k) in sel.candidates.iter().enumerate() {
        writeln!(curve, "mse_kg,{k},{}", fmt_f64(sel.mse_kg[t]))?;
        writeln!(curve, "eic,{k},{}", fmt_f64(sel.eic[t]))?;
    }
    for (k, v) in mse_initial.iter().enumerate() {
        writeln!(curve, "mse_initial,{k},{}", fmt_f64(*v))?;
    }
    write_text(&a.out.join("rank_curve.csv"), &curve)?;
    let report = RankReport {
        candidates: sel.candidates,
        mse: sel.mse_kg,
        eic: sel.eic,
        h: sel.penalty_h,
        r_hat: sel.r_hat,
        g: sel.g_used,
        alpha_mode: sel.alpha_mode,
        alpha_hat: sel.alpha_hat,
        failed: sel.failed,
        mse_initial,
    };
    write_json(&a.out.join("rank.json"), &report)?;
    write_manifest(&a.out, "rank", a, None, &["rank.json", "rank_curve.csv"])
}

fn load_model(path: &Path, y: &MaskedMatrix, x: &Covariates) -> Result<ModelFile> {
    let model: ModelFile = read_json(path).with_context(|| format!("reading {}", path.display()))?;
    model.check_against(y, x)?;
    Ok(model)
}

pub fn infer(a: &InferArgs) -> Result<()> {
    let (y, x) = load_data(&a.data)?;
    let model = load_model(&a.model, &y, &x)?;
    let targets: Vec<Target> = a.target.iter().map(|t| Target::parse(t)).collect::<covmc_core::Result<_>>()?;
    let mom = plugin_moments(&model.state, &y, &x, &model.propensity)?;
    let reports: Vec<InferenceReport> = targets
        .iter()
        .map(|&t| infer_target(t, &model.state, &x, &model.propensity, &mom, a.level, a.null))
        .collect::<covmc_core::Result<_>>()?;
    create_dir(&a.out)?;
    let mut csv = String::from("target,estimate,se,ci_low,ci_high,z,p_value\n");
    for (spec, r) in a.target.iter().zip(&reports) {
        writeln!(
            csv,
            "\"{spec}\",{},{},{},{},{},{}",
            fmt_f64(r.estimate),
            fmt_f64(r.se),
            fmt_f64(r.ci_low),
            fmt_f64(r.ci_high),
            fmt_f64(r.z),
            fmt_f64(r.p_value)
        )?;
    }
    write_text(&a.out.join("infer.csv"), &csv)?;
    write_json(&a.out.join("infer.json"), &reports)?;
    write_manifest(&a.out, "infer", a, None, &["infer.json", "infer.csv"])
}

fn builtin_hypothesis(h: &str, m: usize, d: usize) -> Result<ContrastSpec> {
    let bad = || anyhow::anyhow!("unknown hypothesis {h:?}; use all-zero, coef:P or pair:P,Q");
    if h == "all-zero" {
        return Ok(ContrastSpec::all_zero(m, d));
    }
    let (kind, rest) = h.split_once(':').ok_or_else(bad)?;
    match kind {
        "coef" => Ok(ContrastSpec::coefficient_zero(m, d, rest.trim().parse().map_err(|_| bad())?)?),
        "pair" => {
            let (p, q) = rest.split_once(',').ok_or_else(bad)?;
            let p = p.trim().parse().map_err(|_| bad())?;
            let q = q.trim().parse().map_err(|_| bad())?;
            Ok(ContrastSpec::pairwise(m, d, p, q)?)
        }
        _ => Err(bad()),
    }
}

#[derive(Serialize)]
struct TestReport {
    hypothesis: String,
    t: f64,
    quantile: f64,
    p_value: f64,
    reject: bool,
    replicates: usize,
    alpha: f64,
    seed: u64,
}

pub fn test(a: &TestArgs) -> Result<()> {
    let (y, x) = load_data(&a.data)?;
    let model = load_model(&a.model, &y, &x)?;
    let (spec, hypothesis) = match &a.contrast {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            (ContrastSpec::from_json(&text, y.ncols())?, p.display().to_string())
        }
        None => (builtin_hypothesis(&a.hypothesis, y.ncols(), x.dim())?, a.hypothesis.clone()),
    };
    let res = simultaneous_test(&model.state, &y, &x, &model.propensity, &spec, a.boot, a.alpha, a.seed)?;
    create_dir(&a.out)?;
    let mut csv = String::from("b,t_star\n");
    for (b, v) in res.t_star.iter().enumerate() {
        writeln!(csv, "{b},{}", fmt_f64(*v))?;
    }
    write_text(&a.out.join("test_tstar.csv"), &csv)?;
    let report = TestReport {
        hypothesis,
        t: res.t,
        quantile: res.quantile,
        p_value: res.p_value,
        reject: res.reject,
        replicates: res.replicates,
        alpha: res.alpha,
        seed: res.seed,
    };
    write_json(&a.out.join("test.json"), &report)?;
    write_manifest(&a.out, "test", a, Some(a.seed), &["test.json", "test_tstar.csv"])
}

fn dgp_config(a: &SimulateArgs) -> Result<DgpConfig> {
    let base = match a.dgp {
        1 => DgpConfig::dgp1(a.n, a.m, a.pi, a.seed),
        _ => DgpConfig::dgp2(a.n, a.m, a.c, a.seed),
    };
    let cfg = DgpConfig { r: a.r, rho: a.rho, ..base };
    cfg.validate()?;
    Ok(cfg)
}

fn parse_list<T: std::str::FromStr>(s: &str, sep: char, what: &str) -> Result<Vec<T>> {
    s.split(sep)
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.trim().parse::<T>().map_err(|_| anyhow::anyhow!("cannot parse {what} {t:?}")))
        .collect()
}

fn parse_targets(s: &str) -> Result<Vec<(usize, usize)>> {
    s.split(';')
        .filter(|t| !t.trim().is_empty())
        .map(|t| {
            let v: Vec<usize> = parse_list(t, ',', "target index")?;
            match v.as_slice() {
                [i, j] => Ok((*i, *j)),
                _ => bail!("target {t:?} should be i,j"),
            }
        })
        .collect()
}

#[derive(Serialize)]
struct AggregateReport<'a> {
    experiment: ExperimentArg,
    config: &'a DgpConfig,
    options: &'a ExperimentOptions,
    replicates: usize,
    failures: &'a [Failure],
    aggregates: &'a [Aggregate],
}

fn records_csv(res: &ExperimentResult) -> Result<(String, Option<String>)> {
    let mut out = String::new();
    let mut curves = None;
    match &res.records {
        Records::Mse(recs) => {
            out.push_str("replicate,method,mse_beta,mse_gamma,iterations,converged\n");
            for r in recs {
                for m in &r.methods {
                    writeln!(
                        out,
                        "{},{},{},{},{},{}",
                        r.replicate,
                        m.method.label(),
                        fmt_f64(m.mse_beta),
                        fmt_f64(m.mse_gamma),
                        m.iterations,
                        m.converged
                    )?;
                }
            }
        }
        Records::Coverage(recs) => {
            out.push_str("replicate,i,j,gamma_est,gamma_true,gamma_se,gamma_z,theta_est,theta_true,theta_se,theta_z\n");
            for r in recs {
                for t in &r.targets {
                    writeln!(
                        out,
                        "{},{},{},{},{},{},{},{},{},{},{}",
                        r.replicate,
                        t.i,
                        t.j,
                        fmt_f64(t.gamma_est),
                        fmt_f64(t.gamma_true),
                        fmt_f64(t.gamma_se),
                        fmt_f64(t.gamma_z()),
                        fmt_f64(t.theta_est),
                        fmt_f64(t.theta_true),
                        fmt_f64(t.theta_se),
                        fmt_f64(t.theta_z())
                    )?;
                }
            }
        }
        Records::Rejection(recs) => {
            out.push_str("replicate,rho,t,quantile,p_value,reject\n");
            for r in recs {
                writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    r.replicate,
                    fmt_f64(r.rho),
                    fmt_f64(r.t),
                    fmt_f64(r.quantile),
                    fmt_f64(r.p_value),
                    r.reject
                )?;
            }
        }
        Records::Rank(recs) => {
            out.push_str("replicate,r_hat,alpha_hat\n");
            let mut c = String::from("replicate,curve,k,value\n");
            for r in recs {
                writeln!(out, "{},{},{}", r.replicate, r.r_hat, fmt_f64(r.alpha_hat))?;
                for (t, v) in r.mse_kg.iter().enumerate() {
                    writeln!(c, "{},mse_kg,{},{}", r.replicate, t + 1, fmt_f64(*v))?;
                }
                for (t, v) in r.eic.iter().enumerate() {
                    writeln!(c, "{},eic,{},{}", r.replicate, t + 1, fmt_f64(*v))?;
                }
                for (k, v) in r.mse_initial.iter().enumerate() {
                    writeln!(c, "{},mse_initial,{k},{}", r.replicate, fmt_f64(*v))?;
                }
            }
            curves = Some(c);
        }
    }
    Ok((out, curves))
}

pub fn simulate(a: &SimulateArgs) -> Result<()> {
    let cfg = dgp_config(a)?;
    if a.out.is_none() && a.export.is_none() {
        bail!("nothing to do: pass --out for an experiment or --export for a data set");
    }
    if let Some(dir) = &a.export {
        create_dir(dir)?;
        let draw = gen_dgp(&cfg, a.replicate)?;
        write_triplets(&dir.join("y.csv"), &draw.y)?;
        write_covariates(&dir.join("x.csv"), &draw.x)?;
        #[derive(Serialize)]
        struct Truth<'a> {
            state: &'a covmc_core::ModelState,
            pi: &'a Array1<f64>,
            alpha_n: f64,
        }
        write_json(&dir.join("truth.json"), &Truth { state: &draw.truth, pi: &draw.pi_true, alpha_n: cfg.alpha_n() })?;
        write_manifest(dir, "simulate", a, Some(a.seed), &["y.csv", "x.csv", "truth.json"])?;
    }
    let Some(dir) = &a.out else { return Ok(()) };
    let opts = ExperimentOptions {
        replicates: a.reps,
        steps: a.steps,
        level: a.level,
        max_rank: a.max_rank,
        bootstrap_replicates: a.boot,
        alpha: a.alpha,
    };
    let res = match a.experiment {
        ExperimentArg::Mse => {
            let methods: Vec<Method> = a.methods.split(',').map(|s| Method::parse(s.trim())).collect::<covmc_core::Result<_>>()?;
            run_mse_experiment(&cfg, &opts, &methods)?
        }
        ExperimentArg::Timing => run_timing_experiment(&cfg, &opts)?,
        ExperimentArg::Coverage => run_coverage_experiment(&cfg, &opts, &parse_targets(&a.targets)?)?,
        ExperimentArg::Rejection => {
            let grid = match &a.rho_grid {
                Some(s) => parse_list(s, ',', "rho")?,
                None => default_rho_grid(),
            };
            run_rejection_experiment(&cfg, &opts, &grid)?
        }
        ExperimentArg::Rank => run_rank_experiment(&cfg, &opts)?,
    };
    create_dir(dir)?;
    let mut outputs = vec!["aggregate.json", "records.csv"];
    let (records, curves) = records_csv(&res)?;
    write_text(&dir.join("records.csv"), &records)?;
    if let Some(c) = curves {
        write_text(&dir.join("rank_curves.csv"), &c)?;
        outputs.push("rank_curves.csv");
    }
    let timings = res.timings();
    if !timings.is_empty() {
        let mut t = String::from("replicate,method,seconds\n");
        for (rep, label, s) in timings {
            writeln!(t, "{rep},{label},{}", fmt_f64(s))?;
        }
        write_text(&dir.join("simulate_timing.csv"), &t)?;
        outputs.push("simulate_timing.csv");
    }
    let report = AggregateReport {
        experiment: a.experiment,
        config: &res.config,
        options: &res.options,
        replicates: res.replicates,
        failures: &res.failures,
        aggregates: &res.aggregates,
    };
    write_json(&dir.join("aggregate.json"), &report)?;
    if !res.failures.is_empty() {
        eprintln!("warning: {} of {} replicates failed and were excluded", res.failures.len(), res.replicates);
    }
    if let DgpKind::Dgp2 { .. } = cfg.kind {
        eprintln!("alpha_n = {}", cfg.alpha_n());
    }
    write_manifest(dir, "simulate", a, Some(a.seed), &outputs)
}

pub fn ingest(a: &IngestArgs) -> Result<()> {
    let ds = RatingsDataset::load(&a.ratings, &a.users)?;
    let x = ds.covariates(a.interactions)?;
    let split = ds.split(a.test_per_user, a.seed)?;
    create_dir(&a.out)?;
    write_triplet_list(&a.out.join("y_train.csv"), &split.train)?;
    write_triplet_list(&a.out.join("y_test.csv"), &split.test)?;
    write_covariates(&a.out.join("x.csv"), &x)?;
    let mut users = String::from("row,user\n");
    for (i, u) in ds.user_ids.iter().enumerate() {
        writeln!(users, "{i},{u}")?;
    }
    write_text(&a.out.join("users.csv"), &users)?;
    let mut items = String::from("col,item\n");
    for (j, it) in ds.item_ids.iter().enumerate() {
        writeln!(items, "{j},{it}")?;
    }
    write_text(&a.out.join("items.csv"), &items)?;
    write_manifest(&a.out, "ingest", a, Some(a.seed), &["y_train.csv", "y_test.csv", "x.csv", "users.csv", "items.csv"])
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let x = read_covariates(&a.x)?;
    let model: ModelFile = read_json(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    let dims = Some((model.n, model.m));
    let train = read_triplets(&a.train, dims)?;
    let test = read_triplets(&a.test, dims)?;
    model.check_against(&train, &x)?;
    let split = covmc_core::ratings::Split { n: model.n, m: model.m, train: train.triplets(), test: test.triplets() };
    let report = evaluate(&model.state, &x, &split, &a.model.display().to_string())?;
    create_dir(&a.out)?;
    let mut csv = String::from("split,row,col,rating,predicted,adjusted\n");
    for (name, cells) in [("train", &split.train), ("test", &split.test)] {
        for &(i, j, v) in cells.iter() {
            let pred = model.state.theta_at(&x, i, j);
            writeln!(
                csv,
                "{name},{i},{j},{},{},{}",
                fmt_f64(v),
                fmt_f64(pred),
                fmt_f64(predict_adjusted(&model.state, &x, i, j))
            )?;
        }
    }
    write_text(&a.out.join("predictions.csv"), &csv)?;
    write_json(&a.out.join("eval.json"), &report)?;
    write_manifest(&a.out, "eval", a, None, &["eval.json", "predictions.csv"])
}
