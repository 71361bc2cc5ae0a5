//! Matrix completion with observed covariates and missing-at-random entries:
//! propensity estimation, SVD initialization, alternating least squares,
//! rank selection, entrywise inference and a multiplier-bootstrap test.

pub mod als;
pub mod bootstrap;
pub mod data;
pub mod error;
pub mod inference;
pub mod init;
pub mod io;
pub mod linalg;
pub mod pca;
pub mod propensity;
pub mod rank;
pub mod ratings;
pub mod rng;
pub mod simulate;
pub mod stats;
pub mod svd;

pub use als::{fit_iterative, FitConfig, FitTrace};
pub use data::{Covariates, MaskedMatrix, ModelState};
pub use error::{CovmcError, ErrorClass, Result};
pub use propensity::{fit_propensity, AlphaMode, PropensityFit};
pub use rank::{select_rank, RankConfig, RankSelection};
pub use simulate::{gen_dgp, DgpConfig, DgpKind, ExperimentOptions, ExperimentResult, Method};
