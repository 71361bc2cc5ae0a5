//! Ratings data with user demographics: ingestion, dummy coding, the
//! per-user train/test split and RMSE evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Covariates, MaskedMatrix, ModelState};
use crate::error::{CovmcError, Result};
use crate::rng::{substream, Purpose};

pub const MIN_RATING: f64 = 0.5;
pub const MAX_RATING: f64 = 5.0;
pub const DEFAULT_TEST_PER_USER: usize = 10;

/// Age bands in dummy-coding order; the first is the reference level.
pub const AGE_GROUPS: [&str; 4] = ["0-24", "25-34", "35-49", "50+"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Female,
    Male,
}

impl Gender {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "f" | "female" | "0" => Ok(Gender::Female),
            "m" | "male" | "1" => Ok(Gender::Male),
            _ => Err(CovmcError::UnknownCategory { field: "gender", value: s.into() }),
        }
    }
}

/// Index into [`AGE_GROUPS`]. Accepts the band labels and the MovieLens
/// age codes (1, 18, 25, 35, 45, 50, 56).
pub fn parse_age_group(s: &str) -> Result<usize> {
    let t = s.trim();
    if let Some(k) = AGE_GROUPS.iter().position(|g| *g == t) {
        return Ok(k);
    }
    match t {
        "1" | "18" => Ok(0),
        "25" => Ok(1),
        "35" | "45" => Ok(2),
        "50" | "56" => Ok(3),
        _ => Err(CovmcError::UnknownCategory { field: "age_group", value: s.into() }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserInfo {
    pub gender: Gender,
    pub age_group: usize,
}

/// Design row `[1, G, A1, A2, A3]`, plus `[G A1, G A2, G A3]` with
/// interactions.
pub fn encode_user(u: &UserInfo, interactions: bool) -> Vec<f64> {
    let g = f64::from(u.gender == Gender::Male);
    let a: Vec<f64> = (1..4).map(|k| f64::from(u.age_group == k)).collect();
    let mut row = vec![1.0, g];
    row.extend(&a);
    if interactions {
        row.extend(a.iter().map(|v| g * v));
    }
    row
}

pub fn encode_covariates(users: &[UserInfo], interactions: bool) -> Result<Covariates> {
    if users.is_empty() {
        return Err(CovmcError::InvalidInput("no users to encode".into()));
    }
    let d = if interactions { 8 } else { 5 };
    let mut x = Array2::zeros((users.len(), d));
    for (i, u) in users.iter().enumerate() {
        if u.age_group >= AGE_GROUPS.len() {
            return Err(CovmcError::UnknownCategory { field: "age_group", value: u.age_group.to_string() });
        }
        for (p, v) in encode_user(u, interactions).into_iter().enumerate() {
            x[[i, p]] = v;
        }
    }
    Covariates::new(x, true)
}

#[derive(Debug, Deserialize)]
struct RatingRow {
    user: u64,
    item: u64,
    rating: f64,
}

#[derive(Debug, Deserialize)]
struct UserRow {
    user: u64,
    gender: String,
    age_group: String,
}

/// Ratings on dense indices. Users are numbered in increasing id order over
/// the users table, items in increasing id order over the ratings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingsDataset {
    pub user_ids: Vec<u64>,
    pub item_ids: Vec<u64>,
    pub users: Vec<UserInfo>,
    pub ratings: Vec<(usize, usize, f64)>,
}

impl RatingsDataset {
    pub fn new(user_table: BTreeMap<u64, UserInfo>, raw: &[(u64, u64, f64)]) -> Result<Self> {
        let user_ids: Vec<u64> = user_table.keys().copied().collect();
        let users: Vec<UserInfo> = user_table.values().copied().collect();
        let item_ids: Vec<u64> = raw.iter().map(|r| r.1).collect::<BTreeSet<_>>().into_iter().collect();
        let user_index: BTreeMap<u64, usize> = user_ids.iter().enumerate().map(|(k, &u)| (u, k)).collect();
        let item_index: BTreeMap<u64, usize> = item_ids.iter().enumerate().map(|(k, &j)| (j, k)).collect();
        let mut seen = BTreeSet::new();
        let mut ratings = Vec::with_capacity(raw.len());
        for &(u, it, r) in raw {
            let i = *user_index
                .get(&u)
                .ok_or_else(|| CovmcError::InvalidInput(format!("user {u} is rated but missing from the users table")))?;
            let j = item_index[&it];
            if !(MIN_RATING..=MAX_RATING).contains(&r) {
                return Err(CovmcError::InvalidInput(format!("rating {r} of user {u}, item {it} is outside [0.5, 5]")));
            }
            if !seen.insert((i, j)) {
                return Err(CovmcError::DuplicateEntry { row: i, col: j });
            }
            ratings.push((i, j, r));
        }
        ratings.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        Ok(Self { user_ids, item_ids, users, ratings })
    }

    /// Reads `user,item,rating` and `user,gender,age_group` tables.
    pub fn load(ratings_path: &Path, users_path: &Path) -> Result<Self> {
        let mut table = BTreeMap::new();
        let mut rdr = csv::Reader::from_path(users_path)?;
        for rec in rdr.deserialize() {
            let row: UserRow = rec?;
            let info = UserInfo { gender: Gender::parse(&row.gender)?, age_group: parse_age_group(&row.age_group)? };
            if table.insert(row.user, info).is_some() {
                return Err(CovmcError::InvalidInput(format!("user {} listed twice", row.user)));
            }
        }
        let mut raw = Vec::new();
        let mut rdr = csv::Reader::from_path(ratings_path)?;
        for rec in rdr.deserialize() {
            let row: RatingRow = rec?;
            raw.push((row.user, row.item, row.rating));
        }
        Self::new(table, &raw)
    }

    pub fn n_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn covariates(&self, interactions: bool) -> Result<Covariates> {
        encode_covariates(&self.users, interactions)
    }

    /// Holds out `per_user` ratings of every user, drawn uniformly from the
    /// user's own substream. A user with `per_user` or fewer ratings keeps
    /// one for training.
    pub fn split(&self, per_user: usize, seed: u64) -> Result<Split> {
        let mut by_user: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); self.n_users()];
        for &t in &self.ratings {
            by_user[t.0].push(t);
        }
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, mut rows) in by_user.into_iter().enumerate() {
            if rows.is_empty() {
                return Err(CovmcError::InvalidInput(format!("user {} has no ratings", self.user_ids[i])));
            }
            let mut rng = substream(seed, Purpose::Split, i as u64);
            rows.shuffle(&mut rng);
            let held = per_user.min(rows.len() - 1);
            test.extend_from_slice(&rows[..held]);
            train.extend_from_slice(&rows[held..]);
        }
        train.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        test.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let split = Split { n: self.n_users(), m: self.n_items(), train, test };
        split.check_coverage(&self.item_ids)?;
        Ok(split)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub n: usize,
    pub m: usize,
    pub train: Vec<(usize, usize, f64)>,
    pub test: Vec<(usize, usize, f64)>,
}

impl Split {
    /// Every item needs at least one training rating.
    fn check_coverage(&self, item_ids: &[u64]) -> Result<()> {
        let mut has = vec![false; self.m];
        for &(_, j, _) in &self.train {
            has[j] = true;
        }
        if let Some(j) = has.iter().position(|&h| !h) {
            return Err(CovmcError::InvalidInput(format!(
                "item {} has no training ratings; drop it or lower the test quota",
                item_ids[j]
            )));
        }
        Ok(())
    }

    pub fn train_matrix(&self) -> Result<MaskedMatrix> {
        MaskedMatrix::from_triplets(&self.train, self.n, self.m)
    }
}

/// `min(max(y, 0.5), 5)`
pub fn clamp_rating(y: f64) -> f64 {
    y.clamp(MIN_RATING, MAX_RATING)
}

pub fn predict_adjusted(state: &ModelState, x: &Covariates, i: usize, j: usize) -> f64 {
    clamp_rating(state.theta_at(x, i, j))
}

/// RMSE of the fitted means over `cells`, optionally clamped to the rating
/// scale.
pub fn rmse_eval(state: &ModelState, x: &Covariates, cells: &[(usize, usize, f64)], adjusted: bool) -> Result<f64> {
    if cells.is_empty() {
        return Err(CovmcError::EmptySplit);
    }
    let (n, m) = (state.l.nrows(), state.f.nrows());
    let mut sum = 0.0;
    for &(i, j, y) in cells {
        if i >= n || j >= m {
            return Err(CovmcError::IndexOutOfRange { row: i, col: j, n, m });
        }
        let pred = if adjusted { predict_adjusted(state, x, i, j) } else { state.theta_at(x, i, j) };
        sum += (y - pred) * (y - pred);
    }
    Ok((sum / cells.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rmse_train: f64,
    pub rmse_test: f64,
    pub rmse_adjusted_test: f64,
    pub r_hat_used: usize,
    pub model: String,
}

pub fn evaluate(state: &ModelState, x: &Covariates, split: &Split, model: &str) -> Result<EvalReport> {
    Ok(EvalReport {
        rmse_train: rmse_eval(state, x, &split.train, false)?,
        rmse_test: rmse_eval(state, x, &split.test, false)?,
        rmse_adjusted_test: rmse_eval(state, x, &split.test, true)?,
        r_hat_used: state.rank(),
        model: model.into(),
    })
}
