//! Synthetic world: Gaussian user/item vectors, a fixed piecewise scorer
//! that drives which items get shown, and linear / nonlinear user feedback.

use std::path::Path;

use crate::corpus::{InteractionLog, Record};
use crate::error::{Error, Result};
use crate::matfile::MatrixFile;
use crate::mathcore::{sigmoid, Matrix, RandomStream};

pub const DEFAULT_LISTS_PER_USER: usize = 25;
pub const DEFAULT_LIST_LEN: usize = 5;

pub fn kappa1(x: f64) -> f64 {
    if x > 0.0 {
        x - 0.5
    } else {
        0.0
    }
}

pub fn kappa2(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

pub fn kappa3(x: f64) -> f64 {
    if x < 0.0 {
        x + 0.5
    } else {
        0.0
    }
}

/// Indicator with a strict boundary: `1` only for positive arguments.
fn indicator(x: f64) -> bool {
    x > 0.0
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FeedbackNoise {
    /// `N_y ≡ 0`
    None,
    /// Constant offset added to every response.
    Constant(f64),
    /// `N_y ~ N(0, std²)`, redrawn for every exposure.
    Gaussian { std: f64 },
}

impl FeedbackNoise {
    fn draw(&self, stream: &mut RandomStream) -> f64 {
        match *self {
            FeedbackNoise::None => 0.0,
            FeedbackNoise::Constant(c) => c,
            FeedbackNoise::Gaussian { std } => std * stream.standard_normal(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeedbackMode {
    Linear,
    Nonlinear,
}

impl std::str::FromStr for FeedbackMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(FeedbackMode::Linear),
            "nonlinear" => Ok(FeedbackMode::Nonlinear),
            other => Err(Error::Config(format!("unknown feedback mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for FeedbackMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FeedbackMode::Linear => "linear",
            FeedbackMode::Nonlinear => "nonlinear",
        })
    }
}

/// Ground-truth users and items. The scorer's weight vector is all ones and
/// its bias zero, so neither is stored.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticWorld {
    pub users: Matrix,
    pub items: Matrix,
    pub noise: FeedbackNoise,
}

const BIAS: f64 = 0.0;

impl SyntheticWorld {
    pub fn generate(
        n_users: usize,
        n_items: usize,
        dim: usize,
        noise: FeedbackNoise,
        stream: &mut RandomStream,
    ) -> Self {
        let users = Matrix::random_normal(n_users, dim, 1.0, stream);
        let items = Matrix::random_normal(n_items, dim, 1.0, stream);
        SyntheticWorld {
            users,
            items,
            noise,
        }
    }

    pub fn dim(&self) -> usize {
        self.users.cols()
    }

    pub fn n_users(&self) -> usize {
        self.users.rows()
    }

    pub fn n_items(&self) -> usize {
        self.items.rows()
    }

    fn concat(&self, u: usize, j: usize) -> impl Iterator<Item = f64> + '_ {
        self.users.row(u).iter().chain(self.items.row(j)).copied()
    }

    /// `aᵀκ1(κ2([p_u, q_j])) + b`
    pub fn preference(&self, u: usize, j: usize) -> f64 {
        self.concat(u, j).map(|z| kappa1(kappa2(z))).sum::<f64>() + BIAS
    }

    /// `aᵀκ3(κ2([-p_u, -q_j])) + b`
    pub fn interaction(&self, u: usize, j: usize) -> f64 {
        self.concat(u, j).map(|z| kappa3(kappa2(-z))).sum::<f64>() + BIAS
    }

    /// Score that drives impressions: `1 - σ(preference)`.
    pub fn impression_score(&self, u: usize, j: usize) -> f64 {
        1.0 - sigmoid(self.preference(u, j))
    }

    /// Draws `lists` impression lists of `list_len` distinct items each, by
    /// repeated softmax draws over the impression scores of the items not yet
    /// in the list.
    pub fn sample_impressions(
        &self,
        u: usize,
        lists: usize,
        list_len: usize,
        stream: &mut RandomStream,
    ) -> Result<Vec<Vec<u32>>> {
        if list_len > self.n_items() {
            return Err(Error::domain(format!(
                "list length {list_len} exceeds the {} available items",
                self.n_items()
            )));
        }
        let weights: Vec<f64> = (0..self.n_items())
            .map(|j| self.impression_score(u, j).exp())
            .collect();
        Ok((0..lists)
            .map(|_| draw_without_replacement(&weights, list_len, stream))
            .collect())
    }

    /// Binary response of user `u` to item `j`.
    pub fn user_feedback(
        &self,
        u: usize,
        j: usize,
        mode: FeedbackMode,
        stream: &mut RandomStream,
    ) -> bool {
        let noise = self.noise.draw(stream);
        let x1 = self.preference(u, j);
        let logit = match mode {
            FeedbackMode::Linear => x1,
            FeedbackMode::Nonlinear => x1 + x1 * self.interaction(u, j),
        };
        indicator(sigmoid(logit) + noise - 0.5)
    }

    /// Full observed log: `lists` impressions per user, each slot labelled by
    /// the feedback model. Users draw from their own derived streams, and
    /// impressions and noise come from separate sub-streams so that the
    /// shown lists do not depend on the feedback mode.
    pub fn emit_dataset(
        &self,
        mode: FeedbackMode,
        lists: usize,
        list_len: usize,
        stream: &RandomStream,
    ) -> Result<InteractionLog> {
        let mut records = Vec::with_capacity(self.n_users() * lists);
        for u in 0..self.n_users() {
            let user_stream = stream.derive_indexed("user", u as u64);
            let mut shown = user_stream.derive("impressions");
            let mut noise = user_stream.derive("feedback");
            for list in self.sample_impressions(u, lists, list_len, &mut shown)? {
                let selected = list
                    .iter()
                    .map(|&j| self.user_feedback(u, j as usize, mode, &mut noise))
                    .collect();
                records.push(Record::new(u as u32, list, selected));
            }
        }
        InteractionLog::from_records(self.n_users(), self.n_items(), records)
    }

    pub fn to_matrix_file(&self) -> MatrixFile {
        let mut f = MatrixFile::new();
        f.set_meta("kind", "synthetic-world")
            .set_meta("dim", self.dim())
            .set_meta("users", self.n_users())
            .set_meta("items", self.n_items());
        match self.noise {
            FeedbackNoise::None => f.set_meta("noise", "none"),
            FeedbackNoise::Constant(c) => f.set_meta("noise", format!("constant:{c}")),
            FeedbackNoise::Gaussian { std } => f.set_meta("noise", format!("gaussian:{std}")),
        };
        f.push_matrix("users", self.users.clone())
            .push_matrix("items", self.items.clone());
        f
    }

    pub fn from_matrix_file(f: &MatrixFile) -> Result<Self> {
        if f.require_meta("kind")? != "synthetic-world" {
            return Err(Error::parse(0, "matrix file is not a synthetic world"));
        }
        let noise = parse_noise(f.require_meta("noise")?)?;
        let users = f.require_matrix("users")?.clone();
        let items = f.require_matrix("items")?.clone();
        if users.cols() != items.cols() {
            return Err(Error::parse(0, "user and item vectors differ in dimension"));
        }
        Ok(SyntheticWorld {
            users,
            items,
            noise,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_matrix_file().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_matrix_file(&MatrixFile::load(path)?)
    }
}

pub fn parse_noise(spec: &str) -> Result<FeedbackNoise> {
    let bad = || {
        Error::Config(format!(
            "bad noise spec `{spec}` (want none, constant:C or gaussian:STD)"
        ))
    };
    if spec == "none" || spec == "0" {
        return Ok(FeedbackNoise::None);
    }
    let (kind, value) = spec.split_once(':').ok_or_else(bad)?;
    let value: f64 = value.parse().map_err(|_| bad())?;
    match kind {
        "constant" => Ok(FeedbackNoise::Constant(value)),
        "gaussian" if value >= 0.0 => Ok(FeedbackNoise::Gaussian { std: value }),
        _ => Err(bad()),
    }
}

/// Sequential proportional draws, renormalizing over the remaining items.
fn draw_without_replacement(weights: &[f64], amount: usize, stream: &mut RandomStream) -> Vec<u32> {
    let mut taken = vec![false; weights.len()];
    let mut remaining: f64 = weights.iter().sum();
    let mut out = Vec::with_capacity(amount);
    for _ in 0..amount {
        let target = stream.uniform() * remaining;
        let mut acc = 0.0;
        let mut pick = None;
        for (j, &w) in weights.iter().enumerate() {
            if taken[j] {
                continue;
            }
            acc += w;
            pick = Some(j);
            if acc > target {
                break;
            }
        }
        // rounding can leave `target` just past the last accumulated weight
        let j = pick.expect("at least one item remains");
        taken[j] = true;
        remaining -= weights[j];
        out.push(j as u32);
    }
    out
}
