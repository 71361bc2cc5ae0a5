//! CSV and JSON file formats: response triplets, covariate tables, fitted
//! models and run manifests.
//!
//! Triplet files have the header `row,col,value` with 0-based indices.
//! Covariate files have one column per covariate (`x0,x1,...`), one row per
//! subject.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::als::FitTrace;
use crate::data::{Covariates, MaskedMatrix, ModelState};
use crate::error::{CovmcError, Result};
use crate::pca::PcaTrace;
use crate::propensity::PropensityFit;

/// Format version written into every model file and manifest.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Deserialize)]
struct TripletRow {
    row: usize,
    col: usize,
    value: f64,
}

/// Reads triplets. The grid is `max index + 1` in each direction, enlarged
/// to `dims` when that is given.
pub fn read_triplets(path: &Path, dims: Option<(usize, usize)>) -> Result<MaskedMatrix> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut triplets = Vec::new();
    for rec in rdr.deserialize() {
        let r: TripletRow = rec?;
        triplets.push((r.row, r.col, r.value));
    }
    let (mut n, mut m) = triplets
        .iter()
        .fold((0, 0), |(n, m), &(i, j, _)| (n.max(i + 1), m.max(j + 1)));
    if let Some((dn, dm)) = dims {
        if dn < n || dm < m {
            return Err(CovmcError::DimensionMismatch(format!(
                "declared {dn}x{dm} grid is smaller than the indices in {} ({n}x{m})",
                path.display()
            )));
        }
        n = dn;
        m = dm;
    }
    if n == 0 || m == 0 {
        return Err(CovmcError::InvalidInput(format!("{} has no entries", path.display())));
    }
    MaskedMatrix::from_triplets(&triplets, n, m)
}

pub fn write_triplets(path: &Path, y: &MaskedMatrix) -> Result<()> {
    write_triplet_list(path, &y.triplets())
}

pub fn write_triplet_list(path: &Path, triplets: &[(usize, usize, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["row", "col", "value"])?;
    for &(i, j, v) in triplets {
        w.write_record([i.to_string(), j.to_string(), fmt_f64(v)])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a numeric table with a header row.
pub fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let width = rdr.headers()?.len();
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec?;
        for field in rec.iter() {
            let v: f64 = field.trim().parse().map_err(|_| {
                CovmcError::InvalidInput(format!("non-numeric field {field:?} in {}", path.display()))
            })?;
            data.push(v);
        }
        rows += 1;
    }
    Array2::from_shape_vec((rows, width), data)
        .map_err(|e| CovmcError::DimensionMismatch(format!("{}: {e}", path.display())))
}

pub fn write_matrix(path: &Path, header: &[String], a: &Array2<f64>) -> Result<()> {
    if header.len() != a.ncols() {
        return Err(CovmcError::DimensionMismatch(format!("{} column names for {} columns", header.len(), a.ncols())));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in a.rows() {
        w.write_record(row.iter().map(|&v| fmt_f64(v)))?;
    }
    w.flush()?;
    Ok(())
}

/// Covariates with the intercept detected from an all-ones first column.
pub fn read_covariates(path: &Path) -> Result<Covariates> {
    Covariates::detect(read_matrix(path)?)
}

pub fn write_covariates(path: &Path, x: &Covariates) -> Result<()> {
    let header: Vec<String> = (0..x.dim()).map(|p| format!("x{p}")).collect();
    write_matrix(path, &header, x.matrix())
}

/// Shortest decimal form that parses back to the same value.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:?}")
    } else if v.is_nan() {
        "NaN".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitMethod {
    Ls,
    Pca,
}

/// Iteration record kept with a model. Wall times are left out so the file
/// is reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub objective_per_step: Vec<f64>,
    pub delta_history: Vec<f64>,
    pub steps_taken: usize,
    pub converged: bool,
    pub delta_inf: f64,
    pub ridge_fallbacks: usize,
}

impl From<&FitTrace> for TraceSummary {
    fn from(t: &FitTrace) -> Self {
        Self {
            objective_per_step: t.objective_per_step.clone(),
            delta_history: t.delta_history.clone(),
            steps_taken: t.steps_taken,
            converged: t.converged,
            delta_inf: t.delta_inf,
            ridge_fallbacks: t.ridge_fallbacks,
        }
    }
}

impl From<&PcaTrace> for TraceSummary {
    fn from(t: &PcaTrace) -> Self {
        Self {
            objective_per_step: t.objective_per_step.clone(),
            delta_history: t.delta_history.clone(),
            steps_taken: t.steps_taken,
            converged: t.converged,
            delta_inf: t.delta_inf,
            ridge_fallbacks: t.ridge_fallbacks,
        }
    }
}

/// Contents of `model.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub method: FitMethod,
    pub rank: usize,
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub config: BTreeMap<String, String>,
    pub state: ModelState,
    pub propensity: PropensityFit,
    pub trace: TraceSummary,
}

impl ModelFile {
    pub fn check_against(&self, y: &MaskedMatrix, x: &Covariates) -> Result<()> {
        if (y.nrows(), y.ncols(), x.dim()) != (self.n, self.m, self.d) || x.nrows() != self.n {
            return Err(CovmcError::DimensionMismatch(format!(
                "model was fitted on a {}x{} response with d = {}, got {}x{} with d = {}",
                self.n,
                self.m,
                self.d,
                y.nrows(),
                y.ncols(),
                x.dim()
            )));
        }
        Ok(())
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Record of a run, written beside its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub versions: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, config: BTreeMap<String, String>, seed: Option<u64>) -> Self {
        let mut versions = BTreeMap::new();
        versions.insert("covmc-core".into(), env!("CARGO_PKG_VERSION").into());
        versions.insert("format".into(), FORMAT_VERSION.to_string());
        Self { command: command.into(), config, seed, versions, outputs: Vec::new() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn triplets_round_trip_with_declared_dims() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("y.csv");
        let y = MaskedMatrix::from_triplets(&[(0, 1, 0.1), (2, 0, -3.25e-7), (1, 1, 1.0 / 3.0)], 4, 3).unwrap();
        write_triplets(&p, &y).unwrap();
        assert_eq!(read_triplets(&p, Some((4, 3))).unwrap(), y);
        let inferred = read_triplets(&p, None).unwrap();
        assert_eq!((inferred.nrows(), inferred.ncols()), (3, 2));
        assert!(matches!(read_triplets(&p, Some((2, 3))), Err(CovmcError::DimensionMismatch(_))));
    }

    #[test]
    fn duplicate_and_malformed_rows_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("y.csv");
        fs::write(&p, "row,col,value\n0,0,1\n0,0,2\n").unwrap();
        assert!(matches!(read_triplets(&p, None), Err(CovmcError::DuplicateEntry { row: 0, col: 0 })));
        fs::write(&p, "row,col,value\n0,x,1\n").unwrap();
        assert!(matches!(read_triplets(&p, None), Err(CovmcError::Csv(_))));
    }

    #[test]
    fn covariates_round_trip_and_detect_intercept() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        let x = Covariates::new(array![[1.0, 0.5], [1.0, -2.0], [1.0, 1e-300]], true).unwrap();
        write_covariates(&p, &x).unwrap();
        assert_eq!(read_covariates(&p).unwrap(), x);
    }

    #[test]
    fn floats_print_losslessly() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 1e300, 5.0] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
    }
}
