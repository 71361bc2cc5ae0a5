//! Shared fixtures for the benchmarks.

use covmc_core::als::initialize;
use covmc_core::{fit_propensity, gen_dgp, Covariates, DgpConfig, MaskedMatrix, ModelState, PropensityFit};

pub struct Problem {
    pub y: MaskedMatrix,
    pub x: Covariates,
    pub prop: PropensityFit,
    /// SVD initialization at the true rank
    pub start: ModelState,
}

/// One draw of the constant-rate design with half the entries observed.
pub fn problem(n: usize, m: usize) -> Problem {
    let cfg = DgpConfig::dgp1(n, m, 0.5, 7);
    let draw = gen_dgp(&cfg, 0).expect("simulated data");
    let prop = fit_propensity(&draw.y, &draw.x).expect("propensity fit");
    let start = initialize(&draw.y, &draw.x, &prop, cfg.r).expect("initialization").state();
    Problem { y: draw.y, x: draw.x, prop, start }
}
