//! Recommender simulator: stochastic structural equations for impressions
//! (which items a system shows a user) and selections (which shown items the
//! user picks), each perturbed by Gaussian exogenous noise.
//!
//! Impression noise `α` is indexed by item id and selection noise `β` by list
//! slot. After training, [`fit_posterior`] infers where that noise sat when
//! the log was produced, and [`counterfactual_select`] replays a user's
//! response to a list that was never shown.

mod impression;
mod posterior;
mod selection;

use std::path::Path;

pub use impression::{train_impression_model, ImpressionBatch, ImpressionHyper, ImpressionModel};
pub use posterior::{
    elbo_estimate, fit_diag_gaussian, fit_posterior, AlphaEvidence, BetaEvidence, DiagGaussian,
    Evidence, PosteriorHyper, VariationalPosterior, SIGMA_FLOOR,
};
pub use selection::{train_selection_model, SelectionHyper, SelectionModel};

use crate::error::{Error, Result};
use crate::matfile::MatrixFile;
use crate::mathcore::{softmax, RandomStream};

/// One joint draw of the exogenous variables.
#[derive(Clone, Debug, PartialEq)]
pub struct ExogenousDraw {
    /// Per-item impression noise.
    pub alpha: Vec<f64>,
    /// Per-slot selection noise.
    pub beta: Vec<f64>,
}

impl ExogenousDraw {
    pub fn zeros(n_items: usize, slots: usize) -> Self {
        ExogenousDraw {
            alpha: vec![0.0; n_items],
            beta: vec![0.0; slots],
        }
    }

    /// Draw from the N(0, I) prior.
    pub fn from_prior(n_items: usize, slots: usize, stream: &mut RandomStream) -> Self {
        ExogenousDraw {
            alpha: stream.standard_normal_vec(n_items),
            beta: stream.standard_normal_vec(slots),
        }
    }
}

/// Both structural equations.
#[derive(Clone, Debug, PartialEq)]
pub struct SimParams {
    pub impression: ImpressionModel,
    pub selection: SelectionModel,
}

impl SimParams {
    pub fn n_users(&self) -> usize {
        self.impression.n_users()
    }

    pub fn n_items(&self) -> usize {
        self.impression.n_items()
    }

    pub fn slots(&self) -> usize {
        self.selection.slots()
    }

    pub fn to_matrix_file(&self) -> MatrixFile {
        let mut f = MatrixFile::new();
        f.set_meta("kind", "simulator")
            .set_meta("d_R", self.impression.dim())
            .set_meta("d_S", self.selection.dim())
            .set_meta("users", self.n_users())
            .set_meta("items", self.n_items())
            .set_meta("K", self.slots());
        self.impression.write_matrices(&mut f);
        self.selection.write_matrices(&mut f);
        f
    }

    pub fn from_matrix_file(f: &MatrixFile) -> Result<Self> {
        if f.require_meta("kind")? != "simulator" {
            return Err(Error::parse(0, "matrix file is not a simulator checkpoint"));
        }
        let impression = ImpressionModel::read_matrices(f)?;
        let selection = SelectionModel::read_matrices(f)?;
        let k: usize = f.require_meta_parsed("K")?;
        if selection.slots() != k || impression.n_users() != selection.n_users() {
            return Err(Error::parse(0, "simulator checkpoint dimensions disagree"));
        }
        Ok(SimParams {
            impression,
            selection,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_matrix_file().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_matrix_file(&MatrixFile::load(path)?)
    }
}

/// `P_uᵀQ_j + w^R_j α_j`
pub fn impression_logit(model: &ImpressionModel, u: usize, j: usize, alpha: &[f64]) -> f64 {
    model.logit(model.params(), u, j, alpha[j])
}

/// Probability of showing `list` to `u`: the product over slots of a
/// softmax over every item.
pub fn prob_list(model: &ImpressionModel, u: usize, list: &[u32], alpha: &[f64]) -> f64 {
    let logits: Vec<f64> = (0..model.n_items())
        .map(|j| impression_logit(model, u, j, alpha))
        .collect();
    let probs = softmax(&logits).expect("impression logits are finite");
    list.iter().map(|&j| probs[j as usize]).product()
}

/// Within-list selection probability of every slot of `list`.
pub fn slot_probabilities(
    model: &SelectionModel,
    u: usize,
    list: &[u32],
    beta: &[f64],
) -> Vec<f64> {
    let logits: Vec<f64> = list
        .iter()
        .enumerate()
        .map(|(t, &j)| model.logit(model.params(), u, j as usize, t, beta[t]))
        .collect();
    softmax(&logits).expect("selection logits are finite")
}

/// Probability that `u` selects slot `t` of `list`.
pub fn prob_select(
    model: &SelectionModel,
    u: usize,
    list: &[u32],
    t: usize,
    beta: &[f64],
) -> Result<f64> {
    if t >= list.len() {
        return Err(Error::domain(format!(
            "slot {t} outside a list of {}",
            list.len()
        )));
    }
    Ok(slot_probabilities(model, u, list, beta)[t])
}

/// Probability of a selected slot set: the product over its members.
pub fn prob_select_set(
    model: &SelectionModel,
    u: usize,
    list: &[u32],
    slots: &[usize],
    beta: &[f64],
) -> f64 {
    let p = slot_probabilities(model, u, list, beta);
    slots.iter().map(|&t| p[t]).product()
}

/// Simulated response to an intervened list.
#[derive(Clone, Debug, PartialEq)]
pub struct CounterfactualSelection {
    /// Items of the `m` most probable slots, most probable first.
    pub selected: Vec<u32>,
    /// Selection probability of every slot of the list.
    pub slot_probs: Vec<f64>,
}

/// Slots ordered by decreasing probability, ties to the lower slot.
pub fn rank_slots(probs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order
}

/// Draws `β̂` from the posterior, scores every slot of `list` for user `u`,
/// and keeps the `m` most probable items.
pub fn counterfactual_select(
    params: &SimParams,
    posterior: &VariationalPosterior,
    u: usize,
    list: &[u32],
    m: usize,
    stream: &mut RandomStream,
) -> Result<CounterfactualSelection> {
    if m > list.len() {
        return Err(Error::domain(format!(
            "cannot select {m} items from a list of {}",
            list.len()
        )));
    }
    if list.len() > params.slots() {
        return Err(Error::domain(format!(
            "list of {} exceeds the {} slots the selection model knows",
            list.len(),
            params.slots()
        )));
    }
    let beta = posterior.beta.sample(stream)?;
    let slot_probs = slot_probabilities(&params.selection, u, list, &beta);
    let selected = rank_slots(&slot_probs)
        .into_iter()
        .take(m)
        .map(|t| list[t])
        .collect();
    Ok(CounterfactualSelection {
        selected,
        slot_probs,
    })
}
