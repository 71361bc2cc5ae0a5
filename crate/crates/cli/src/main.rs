use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use covmc_core::{CovmcError, ErrorClass};
use serde::Serialize;

mod commands;
mod config;

/// Matrix completion with row covariates.
///
/// Every flag can also be set in a flat `key = value` file passed with
/// `--config`; flags on the command line win.
#[derive(Debug, Parser)]
#[command(name = "covmc", version, args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the model by iterative least squares or iterative PCA.
    Fit(FitArgs),
    /// Select the rank by the information criterion.
    Rank(RankArgs),
    /// Confidence intervals for entries of Gamma, Theta or beta.
    Infer(InferArgs),
    /// Multiplier-bootstrap test of linear hypotheses on beta.
    Test(TestArgs),
    /// Run a simulation experiment or export one simulated data set.
    Simulate(SimulateArgs),
    /// Encode a ratings data set and split it into train and test.
    Ingest(IngestArgs),
    /// RMSE of a fitted model on a train/test split.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodArg {
    Ls,
    Pca,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphaArg {
    Auto,
    Constant,
    Covariate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentArg {
    Mse,
    Coverage,
    Rejection,
    Rank,
    Timing,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    /// Response triplets (`row,col,value`).
    #[arg(long)]
    pub y: PathBuf,
    /// Covariates, one row per subject.
    #[arg(long)]
    pub x: PathBuf,
    /// Declared number of rows, if larger than the largest row index.
    #[arg(long)]
    pub n: Option<usize>,
    /// Declared number of columns.
    #[arg(long)]
    pub m: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FitArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    /// Rank of Gamma; selected by the information criterion when omitted.
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long, default_value_t = 10)]
    pub max_rank: usize,
    #[arg(long, value_enum, default_value_t = MethodArg::Ls)]
    pub method: MethodArg,
    /// Number of block-update steps when not iterating to convergence.
    #[arg(long, default_value_t = 3)]
    pub steps: usize,
    /// Iterate until the sup-norm change of Theta falls below `tol`.
    #[arg(long)]
    pub converge: bool,
    #[arg(long, default_value_t = covmc_core::als::DEFAULT_CONVERGE_STEPS)]
    pub max_steps: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, value_enum, default_value_t = AlphaArg::Auto)]
    pub alpha_mode: AlphaArg,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RankArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 10)]
    pub max_rank: usize,
    #[arg(long, default_value_t = 3)]
    pub steps: usize,
    #[arg(long, default_value_t = covmc_core::rank::DEFAULT_C_H)]
    pub c_h: f64,
    #[arg(long, default_value_t = covmc_core::rank::DEFAULT_DELTA_H)]
    pub delta_h: f64,
    #[arg(long, value_enum, default_value_t = AlphaArg::Auto)]
    pub alpha_mode: AlphaArg,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct InferArgs {
    /// `model.json` written by `fit`.
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    /// `gamma:i,j`, `theta:i,j` (or `mu:i,j`) or `beta:j,p`, 0-based.
    #[arg(long, required = true)]
    pub target: Vec<String>,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    /// Null value for the z test.
    #[arg(long, default_value_t = 0.0)]
    pub null: f64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TestArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    /// Contrast file `{"group": [...], "A": [[...]], "a0": [...]}`.
    #[arg(long, conflicts_with = "hypothesis")]
    pub contrast: Option<PathBuf>,
    /// Built-in hypothesis: `all-zero`, `coef:P` or `pair:P,Q`.
    #[arg(long, default_value = "all-zero")]
    pub hypothesis: String,
    #[arg(long, default_value_t = covmc_core::bootstrap::DEFAULT_REPLICATES)]
    pub boot: usize,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    /// 1: constant observation rate, 2: covariate-dependent rate.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub dgp: u8,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub m: usize,
    /// Observation rate of design 1.
    #[arg(long, default_value_t = 0.5)]
    pub pi: f64,
    /// Rate constant of design 2.
    #[arg(long, default_value_t = 2.0)]
    pub c: f64,
    #[arg(long, default_value_t = 3)]
    pub r: usize,
    #[arg(long, default_value_t = 1.0)]
    pub rho: f64,
    #[arg(long, default_value_t = 100)]
    pub reps: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = ExperimentArg::Mse)]
    pub experiment: ExperimentArg,
    /// Comma-separated methods for the MSE experiment.
    #[arg(long, default_value = "init,ls3,ls_c,pca3,pca_c")]
    pub methods: String,
    #[arg(long, default_value_t = 3)]
    pub steps: usize,
    #[arg(long, default_value_t = 10)]
    pub max_rank: usize,
    /// Coverage targets as `i,j` pairs separated by `;`, 0-based.
    #[arg(long, default_value = "1,2")]
    pub targets: String,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    /// Comma-separated coefficient scales; the default grid when omitted.
    #[arg(long)]
    pub rho_grid: Option<String>,
    #[arg(long, default_value_t = 500)]
    pub boot: usize,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Output directory for experiment results.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write one replicate's data (`y.csv`, `x.csv`, `truth.json`) here.
    #[arg(long)]
    pub export: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub replicate: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct IngestArgs {
    /// `user,item,rating`
    #[arg(long)]
    pub ratings: PathBuf,
    /// `user,gender,age_group`
    #[arg(long)]
    pub users: PathBuf,
    /// Add gender by age-group interaction columns.
    #[arg(long)]
    pub interactions: bool,
    #[arg(long, default_value_t = covmc_core::ratings::DEFAULT_TEST_PER_USER)]
    pub test_per_user: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Training triplets used for the fit.
    #[arg(long)]
    pub train: PathBuf,
    /// Held-out triplets.
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub x: PathBuf,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

/// Exit code for a failed run: 3 for numerical failures, 2 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    let class = err.chain().find_map(|e| e.downcast_ref::<CovmcError>()).map(CovmcError::class);
    match class {
        Some(ErrorClass::Numerical) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let argv: Vec<OsString> = std::env::args_os().collect();
    let args = match config::expand_args(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(args);
    let res = match cli.command {
        Command::Fit(a) => commands::fit(&a),
        Command::Rank(a) => commands::rank(&a),
        Command::Infer(a) => commands::infer(&a),
        Command::Test(a) => commands::test(&a),
        Command::Simulate(a) => commands::simulate(&a),
        Command::Ingest(a) => commands::ingest(&a),
        Command::Eval(a) => commands::eval(&a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
