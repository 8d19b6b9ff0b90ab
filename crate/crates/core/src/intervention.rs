//! Learned interventions on the recommendation list. A Gaussian policy
//! proposes an item-space center per user, the impression equation turns it
//! into a list, the selection equation labels the list, and the resulting
//! samples feed the target ranker. The policy is pushed by REINFORCE toward
//! lists on which the ranker's loss is high.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matfile::MatrixFile;
use crate::mathcore::{dot, sample_gaussian, RandomStream, Segment};
use crate::rankers::{loss_pairwise, loss_pointwise, Labeled, Objective, RankingModel, Triplet};
use crate::simulator::{counterfactual_select, rank_slots, SimParams, VariationalPosterior};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Two affine layers with a ReLU between them mapping a user embedding to the
/// mean of a diagonal Gaussian over item-space centers. The log standard
/// deviation is a free, state-independent vector.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPolicy {
    w1: Segment,
    b1: Segment,
    w2: Segment,
    b2: Segment,
    log_std: Segment,
    params: Vec<f64>,
}

impl GaussianPolicy {
    pub fn zeros(dim: usize, hidden: usize) -> Result<Self> {
        if hidden == 0 || dim == 0 {
            return Err(Error::domain("policy dimensions must be positive"));
        }
        let ([w1, b1, w2, b2, log_std], len) = Segment::layout([
            (hidden, dim),
            (1, hidden),
            (dim, hidden),
            (1, dim),
            (1, dim),
        ]);
        Ok(GaussianPolicy {
            w1,
            b1,
            w2,
            b2,
            log_std,
            params: vec![0.0; len],
        })
    }

    /// He-initialized first layer, identity-scaled output layer and a common
    /// initial standard deviation.
    pub fn initialized(
        dim: usize,
        hidden: usize,
        init_std: f64,
        stream: &mut RandomStream,
    ) -> Result<Self> {
        if !(init_std > 0.0) {
            return Err(Error::domain("initial policy std must be positive"));
        }
        let mut p = Self::zeros(dim, hidden)?;
        let s1 = (2.0 / dim as f64).sqrt();
        for x in p.w1.slice_mut(&mut p.params) {
            *x = s1 * stream.standard_normal();
        }
        let s2 = (1.0 / hidden as f64).sqrt();
        for x in p.w2.slice_mut(&mut p.params) {
            *x = s2 * stream.standard_normal();
        }
        p.log_std.slice_mut(&mut p.params).fill(init_std.ln());
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.w1.cols
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_log_std(&mut self, value: f64) {
        self.log_std.slice_mut(&mut self.params).fill(value);
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|x| x.is_finite())
    }

    fn hidden_pre(&self, p: &[f64], x: &[f64]) -> Vec<f64> {
        let b1 = self.b1.slice(p);
        (0..self.hidden())
            .map(|r| dot(self.w1.row(p, r), x) + b1[r])
            .collect()
    }

    fn mean_from(&self, p: &[f64], pre: &[f64]) -> Vec<f64> {
        let z: Vec<f64> = pre.iter().map(|&a| a.max(0.0)).collect();
        let b2 = self.b2.slice(p);
        (0..self.dim())
            .map(|r| dot(self.w2.row(p, r), &z) + b2[r])
            .collect()
    }

    pub fn mean(&self, user_embed: &[f64]) -> Vec<f64> {
        let pre = self.hidden_pre(&self.params, user_embed);
        self.mean_from(&self.params, &pre)
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std
            .slice(&self.params)
            .iter()
            .map(|s| s.exp())
            .collect()
    }

    fn log_prob_with(&self, p: &[f64], x: &[f64], action: &[f64]) -> f64 {
        let pre = self.hidden_pre(p, x);
        let mu = self.mean_from(p, &pre);
        let ls = self.log_std.slice(p);
        (0..self.dim())
            .map(|k| {
                let z = (action[k] - mu[k]) / ls[k].exp();
                -0.5 * z * z - ls[k] - 0.5 * LN_2PI
            })
            .sum()
    }

    /// Diagonal-Gaussian log-density of `action` given the user embedding.
    pub fn log_prob(&self, user_embed: &[f64], action: &[f64]) -> f64 {
        self.log_prob_with(&self.params, user_embed, action)
    }

    /// Adds `coef · ∇θ log π(action | x)` to `g`.
    fn log_prob_grad(&self, p: &[f64], x: &[f64], action: &[f64], coef: f64, g: &mut [f64]) {
        let (dim, hidden) = (self.dim(), self.hidden());
        let pre = self.hidden_pre(p, x);
        let z: Vec<f64> = pre.iter().map(|&a| a.max(0.0)).collect();
        let mu = self.mean_from(p, &pre);
        let ls = self.log_std.slice(p);
        let mut dz = vec![0.0; hidden];
        for k in 0..dim {
            let var = (2.0 * ls[k]).exp();
            let diff = action[k] - mu[k];
            let dmu = coef * diff / var;
            g[self.log_std.offset + k] += coef * (diff * diff / var - 1.0);
            g[self.b2.offset + k] += dmu;
            let row = self.w2.offset + k * hidden;
            for h in 0..hidden {
                g[row + h] += dmu * z[h];
                dz[h] += dmu * p[row + h];
            }
        }
        for h in 0..hidden {
            if pre[h] <= 0.0 {
                continue;
            }
            g[self.b1.offset + h] += dz[h];
            let row = self.w1.offset + h * dim;
            for c in 0..dim {
                g[row + c] += dz[h] * x[c];
            }
        }
    }

    /// `Σ_t (r_t − r̄) · log π(a_t | x_t)` and, optionally, its gradient.
    pub fn surrogate(&self, params: &[f64], steps: &[PolicyStep], grad: Option<&mut [f64]>) -> f64 {
        if steps.is_empty() {
            return 0.0;
        }
        let baseline = steps.iter().map(|s| s.reward).sum::<f64>() / steps.len() as f64;
        let mut total = 0.0;
        let mut grad = grad;
        for s in steps {
            let adv = s.reward - baseline;
            total += adv * self.log_prob_with(params, &s.state, &s.action);
            if let Some(g) = grad.as_deref_mut() {
                if adv != 0.0 {
                    self.log_prob_grad(params, &s.state, &s.action, adv, g);
                }
            }
        }
        total
    }

    pub fn to_matrix_file(&self) -> MatrixFile {
        let mut f = MatrixFile::new();
        f.set_meta("kind", "policy")
            .set_meta("dim", self.dim())
            .set_meta("hidden", self.hidden());
        for (name, seg) in self.named() {
            f.push_matrix(name, seg.to_matrix(&self.params));
        }
        f
    }

    fn named(&self) -> [(&'static str, Segment); 5] {
        [
            ("policy_w1", self.w1),
            ("policy_b1", self.b1),
            ("policy_w2", self.w2),
            ("policy_b2", self.b2),
            ("policy_log_std", self.log_std),
        ]
    }

    pub fn from_matrix_file(f: &MatrixFile) -> Result<Self> {
        if f.require_meta("kind")? != "policy" {
            return Err(Error::parse(0, "not a policy checkpoint"));
        }
        let mut p = Self::zeros(
            f.require_meta_parsed("dim")?,
            f.require_meta_parsed("hidden")?,
        )?;
        for (name, seg) in p.named() {
            let m = f.require_matrix(name)?;
            if m.rows() != seg.rows || m.cols() != seg.cols {
                return Err(Error::parse(
                    0,
                    format!("matrix `{name}` has the wrong shape"),
                ));
            }
            seg.slice_mut(&mut p.params).copy_from_slice(m.as_slice());
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_matrix_file().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_matrix_file(&MatrixFile::load(path)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyDraw {
    /// Center actually used: policy draw plus exploration noise.
    pub center: Vec<f64>,
    /// The policy's own draw, before exploration noise.
    pub action: Vec<f64>,
    /// `log π(action | user)`.
    pub logprob: f64,
}

/// `τ̂ = μ(x) + σ_π ε + N_t` with `N_t ~ N(0, exploration_std² I)`.
pub fn policy_sample(
    policy: &GaussianPolicy,
    user_embed: &[f64],
    exploration_std: f64,
    stream: &mut RandomStream,
) -> Result<PolicyDraw> {
    if user_embed.len() != policy.dim() {
        return Err(Error::domain(
            "user embedding does not match the policy input size",
        ));
    }
    let mean = policy.mean(user_embed);
    let action = sample_gaussian(stream, &mean, &policy.std())?;
    let logprob = policy.log_prob(user_embed, &action);
    let center = if exploration_std > 0.0 {
        action
            .iter()
            .map(|a| a + exploration_std * stream.standard_normal())
            .collect()
    } else {
        action.clone()
    };
    Ok(PolicyDraw {
        center,
        action,
        logprob,
    })
}

/// Exploration std decaying linearly from `start` to zero over `total`
/// episodes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExplorationSchedule {
    pub start: f64,
    pub total: u64,
}

impl ExplorationSchedule {
    pub fn std_at(&self, episode: u64) -> f64 {
        if self.total == 0 || episode >= self.total {
            return 0.0;
        }
        self.start * (1.0 - episode as f64 / self.total as f64)
    }
}

impl Default for ExplorationSchedule {
    fn default() -> Self {
        ExplorationSchedule {
            start: 0.5,
            total: 0,
        }
    }
}

/// The `k` items with the highest `τ̂ᵀQ_k + w^R_k α_k`, descending, ties to
/// the lower item id.
pub fn realize_list(
    params: &SimParams,
    center: &[f64],
    alpha: &[f64],
    k: usize,
) -> Result<Vec<u32>> {
    let imp = &params.impression;
    if k > imp.n_items() {
        return Err(Error::domain(format!(
            "list length {k} exceeds {} items",
            imp.n_items()
        )));
    }
    if center.len() != imp.dim() || alpha.len() != imp.n_items() {
        return Err(Error::domain(
            "center or alpha does not match the impression model",
        ));
    }
    let mut scored: Vec<(u32, f64)> = (0..imp.n_items())
        .map(|j| {
            (
                j as u32,
                dot(center, imp.item_embedding(j)) + imp.weight(j) * alpha[j],
            )
        })
        .collect();
    crate::rankers::rank_by_score(&mut scored);
    Ok(scored.into_iter().take(k).map(|(j, _)| j).collect())
}

/// Uniform list of `k` distinct items.
pub fn random_list(n_items: usize, k: usize, stream: &mut RandomStream) -> Result<Vec<u32>> {
    if k > n_items {
        return Err(Error::domain(format!(
            "list length {k} exceeds {n_items} items"
        )));
    }
    Ok(stream
        .sample_distinct(n_items, k)
        .into_iter()
        .map(|j| j as u32)
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Episode(u64),
    Random,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Provenance::Episode(id) => write!(f, "episode:{id}"),
            Provenance::Random => f.write_str("random"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CfPair {
    pub triplet: Triplet,
    /// Selection probability of the preferred item's slot.
    pub pos_prob: f64,
    pub neg_prob: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CfPoint {
    pub sample: Labeled,
    /// Selection probability of the item's slot.
    pub prob: f64,
}

/// Samples synthesized from one simulated response.
#[derive(Clone, Debug, PartialEq)]
pub struct CounterfactualBatch {
    pub mode: Objective,
    pub pairs: Vec<CfPair>,
    pub points: Vec<CfPoint>,
    pub provenance: Provenance,
}

impl CounterfactualBatch {
    pub fn empty(mode: Objective, provenance: Provenance) -> Self {
        CounterfactualBatch {
            mode,
            pairs: Vec::new(),
            points: Vec::new(),
            provenance,
        }
    }

    pub fn len(&self) -> usize {
        match self.mode {
            Objective::Pairwise => self.pairs.len(),
            Objective::Pointwise => self.points.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn triplets(&self) -> Vec<Triplet> {
        self.pairs.iter().map(|p| p.triplet).collect()
    }

    pub fn labeled(&self) -> Vec<Labeled> {
        self.points.iter().map(|p| p.sample).collect()
    }

    /// Target-model loss on this batch, the intervention reward.
    pub fn loss(&self, model: &RankingModel) -> f64 {
        match self.mode {
            Objective::Pairwise => loss_pairwise(model, &self.triplets()),
            Objective::Pointwise => loss_pointwise(model, &self.labeled()),
        }
    }
}

fn check_list(list: &[u32], slot_probs: &[f64]) -> Result<()> {
    if list.len() != slot_probs.len() {
        return Err(Error::domain(
            "list and slot probabilities differ in length",
        ));
    }
    if slot_probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::domain("slot probabilities must lie in [0, 1]"));
    }
    Ok(())
}

/// Keeps the `k` most and `k` least probable slots. Pairwise mode emits all
/// `k²` (top, bottom) triplets; pointwise labels the top items 1 and the
/// bottom items 0.
pub fn build_samples(
    user: u32,
    list: &[u32],
    slot_probs: &[f64],
    mode: Objective,
    k: usize,
    provenance: Provenance,
) -> Result<CounterfactualBatch> {
    check_list(list, slot_probs)?;
    if k == 0 || 2 * k > list.len() {
        return Err(Error::domain(format!(
            "noise-control level {k} needs 1 <= k <= {}",
            list.len() / 2
        )));
    }
    let order = rank_slots(slot_probs);
    let top = &order[..k];
    let bottom = &order[order.len() - k..];
    let mut batch = CounterfactualBatch::empty(mode, provenance);
    match mode {
        Objective::Pairwise => {
            for &a in top {
                for &b in bottom {
                    batch.pairs.push(CfPair {
                        triplet: Triplet {
                            user,
                            pos: list[a],
                            neg: list[b],
                        },
                        pos_prob: slot_probs[a],
                        neg_prob: slot_probs[b],
                    });
                }
            }
        }
        Objective::Pointwise => {
            for (slots, label) in [(top, true), (bottom, false)] {
                for &t in slots {
                    batch.points.push(CfPoint {
                        sample: Labeled {
                            user,
                            item: list[t],
                            label,
                        },
                        prob: slot_probs[t],
                    });
                }
            }
        }
    }
    Ok(batch)
}

/// Every (selected, unselected) pair, or every slot labelled by selection.
pub fn build_samples_unfiltered(
    user: u32,
    list: &[u32],
    selected: &[u32],
    slot_probs: &[f64],
    mode: Objective,
    provenance: Provenance,
) -> Result<CounterfactualBatch> {
    check_list(list, slot_probs)?;
    if let Some(s) = selected.iter().find(|s| !list.contains(s)) {
        return Err(Error::domain(format!(
            "selected item {s} is not in the list"
        )));
    }
    let mut batch = CounterfactualBatch::empty(mode, provenance);
    let is_sel: Vec<bool> = list.iter().map(|j| selected.contains(j)).collect();
    match mode {
        Objective::Pairwise => {
            for a in (0..list.len()).filter(|&t| is_sel[t]) {
                for b in (0..list.len()).filter(|&t| !is_sel[t]) {
                    batch.pairs.push(CfPair {
                        triplet: Triplet {
                            user,
                            pos: list[a],
                            neg: list[b],
                        },
                        pos_prob: slot_probs[a],
                        neg_prob: slot_probs[b],
                    });
                }
            }
        }
        Objective::Pointwise => {
            for t in 0..list.len() {
                batch.points.push(CfPoint {
                    sample: Labeled {
                        user,
                        item: list[t],
                        label: is_sel[t],
                    },
                    prob: slot_probs[t],
                });
            }
        }
    }
    Ok(batch)
}

/// Tab-separated export: a mode header, then one sample per row.
pub fn write_batches_tsv<W: Write>(batches: &[CounterfactualBatch], mut out: W) -> Result<()> {
    let mode = batches
        .first()
        .map(|b| b.mode)
        .unwrap_or(Objective::Pairwise);
    let mut text = String::new();
    let _ = writeln!(text, "# mode {mode}");
    match mode {
        Objective::Pairwise => {
            let _ = writeln!(text, "user\tpos_item\tneg_item\tconfidence\tprovenance");
        }
        Objective::Pointwise => {
            let _ = writeln!(text, "user\titem\tlabel\tconfidence\tprovenance");
        }
    }
    for b in batches {
        if b.mode != mode {
            return Err(Error::domain(
                "cannot mix pairwise and pointwise batches in one file",
            ));
        }
        for p in &b.pairs {
            let t = p.triplet;
            let _ = writeln!(
                text,
                "{}\t{}\t{}\t{}\t{}",
                t.user, t.pos, t.neg, p.pos_prob, b.provenance
            );
        }
        for p in &b.points {
            let s = p.sample;
            let _ = writeln!(
                text,
                "{}\t{}\t{}\t{}\t{}",
                s.user,
                s.item,
                u8::from(s.label),
                p.prob,
                b.provenance
            );
        }
    }
    out.write_all(text.as_bytes())?;
    Ok(())
}

/// State and action of one policy decision, all REINFORCE needs.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyStep {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub id: u64,
    pub user: u32,
    pub center: Vec<f64>,
    pub action: Vec<f64>,
    pub logprob: f64,
    pub list: Vec<u32>,
    pub selected: Vec<u32>,
    pub reward: f64,
}

impl Episode {
    pub fn step(&self, params: &SimParams) -> PolicyStep {
        PolicyStep {
            state: params
                .impression
                .user_embedding(self.user as usize)
                .to_vec(),
            action: self.action.clone(),
            reward: self.reward,
        }
    }
}

/// One ascent step on the baseline-subtracted REINFORCE surrogate. A
/// non-finite gradient leaves the policy unchanged.
pub fn reinforce_update(
    policy: &GaussianPolicy,
    steps: &[PolicyStep],
    lr: f64,
) -> Result<GaussianPolicy> {
    if steps.is_empty() {
        return Err(Error::domain("REINFORCE needs at least one episode"));
    }
    if let Some(s) = steps.iter().find(|s| !s.reward.is_finite()) {
        return Err(Error::domain(format!(
            "episode reward {} is not finite",
            s.reward
        )));
    }
    let mut grad = vec![0.0; policy.params.len()];
    policy.surrogate(&policy.params, steps, Some(&mut grad));
    if grad.iter().any(|g| !g.is_finite()) {
        log::warn!("skipping policy update with a non-finite gradient");
        return Ok(policy.clone());
    }
    let mut next = policy.clone();
    for (p, g) in next.params.iter_mut().zip(&grad) {
        *p += lr * g;
    }
    Ok(next)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InterventionMode {
    Learned,
    Random,
}

impl std::str::FromStr for InterventionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(InterventionMode::Learned),
            "random" => Ok(InterventionMode::Random),
            _ => Err(Error::Config(format!(
                "intervention mode must be `learned` or `random`, got `{s}`"
            ))),
        }
    }
}

impl std::fmt::Display for InterventionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InterventionMode::Learned => "learned",
            InterventionMode::Random => "random",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundSpec {
    pub mode: InterventionMode,
    pub objective: Objective,
    pub list_len: usize,
    /// Actions per user in this round.
    pub steps_per_user: usize,
    /// Noise-control level; `None` keeps every (selected, unselected) pair.
    pub k: Option<usize>,
    /// Selections per simulated list when `k` is `None`.
    pub select_m: usize,
    pub exploration: ExplorationSchedule,
    /// Global index of this round's first episode, for the schedule and ids.
    pub first_episode: u64,
}

/// Intervenes once per user and step: draws `α` from its posterior, a
/// center from the policy (or a uniform list), replays the selection, builds
/// samples and scores them with the target model.
pub fn run_intervention_round(
    policy: Option<&GaussianPolicy>,
    params: &SimParams,
    posterior: &VariationalPosterior,
    target: &RankingModel,
    users: &[u32],
    spec: &RoundSpec,
    stream: &RandomStream,
) -> Result<(Vec<CounterfactualBatch>, Vec<Episode>)> {
    if spec.mode == InterventionMode::Learned && policy.is_none() {
        return Err(Error::domain("learned intervention needs a policy"));
    }
    let mut batches = Vec::new();
    let mut episodes = Vec::new();
    let mut id = spec.first_episode;
    for &u in users {
        for t in 0..spec.steps_per_user {
            let mut s = stream
                .derive_indexed("user", u as u64)
                .derive_indexed("step", t as u64);
            let (list, draw) = match spec.mode {
                InterventionMode::Learned => {
                    let policy = policy.unwrap();
                    let alpha = posterior.alpha.sample(&mut s)?;
                    let x = params.impression.user_embedding(u as usize);
                    let d = policy_sample(policy, x, spec.exploration.std_at(id), &mut s)?;
                    (
                        realize_list(params, &d.center, &alpha, spec.list_len)?,
                        Some(d),
                    )
                }
                InterventionMode::Random => (
                    random_list(params.impression.n_items(), spec.list_len, &mut s)?,
                    None,
                ),
            };
            let m = spec.select_m.min(list.len());
            let cf = counterfactual_select(params, posterior, u as usize, &list, m, &mut s)?;
            let provenance = match spec.mode {
                InterventionMode::Learned => Provenance::Episode(id),
                InterventionMode::Random => Provenance::Random,
            };
            let batch = match spec.k {
                Some(k) => build_samples(u, &list, &cf.slot_probs, spec.objective, k, provenance)?,
                None => build_samples_unfiltered(
                    u,
                    &list,
                    &cf.selected,
                    &cf.slot_probs,
                    spec.objective,
                    provenance,
                )?,
            };
            let reward = batch.loss(target);
            if let Some(d) = draw {
                episodes.push(Episode {
                    id,
                    user: u,
                    center: d.center,
                    action: d.action,
                    logprob: d.logprob,
                    list,
                    selected: cf.selected,
                    reward,
                });
            }
            batches.push(batch);
            id += 1;
        }
    }
    Ok((batches, episodes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mathcore::{finite_diff_check, DEFAULT_FD_STEP};
    use crate::rankers::ModelKind;
    use crate::simulator::{ImpressionModel, SelectionModel};
    use proptest::prelude::*;

    fn toy_params(n_items: usize, dim: usize, seed: u64) -> SimParams {
        let mut s = RandomStream::new(seed);
        let mut impression = ImpressionModel::zeros(4, n_items, dim);
        for x in impression.params_mut() {
            *x = s.standard_normal();
        }
        let mut selection = SelectionModel::zeros(4, n_items, dim, 5);
        for x in selection.params_mut() {
            *x = s.standard_normal();
        }
        SimParams {
            impression,
            selection,
        }
    }

    #[test]
    fn zero_std_and_noise_give_the_mean() {
        let mut p = GaussianPolicy::initialized(3, 8, 0.1, &mut RandomStream::new(1)).unwrap();
        p.set_log_std(f64::NEG_INFINITY);
        let x = [0.3, -0.2, 1.0];
        let d = policy_sample(&p, &x, 0.0, &mut RandomStream::new(2)).unwrap();
        assert_eq!(d.center, p.mean(&x));
    }

    #[test]
    fn log_density_at_the_mode() {
        let mut p = GaussianPolicy::initialized(4, 5, 1.0, &mut RandomStream::new(3)).unwrap();
        p.set_log_std(0.0);
        let x = [0.1, 0.2, 0.3, 0.4];
        let lp = p.log_prob(&x, &p.mean(&x));
        assert!((lp + 2.0 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn different_seeds_different_centers() {
        let p = GaussianPolicy::initialized(3, 4, 0.5, &mut RandomStream::new(4)).unwrap();
        let a = policy_sample(&p, &[1.0, 0.0, 0.0], 0.5, &mut RandomStream::new(5)).unwrap();
        let b = policy_sample(&p, &[1.0, 0.0, 0.0], 0.5, &mut RandomStream::new(6)).unwrap();
        assert_ne!(a.center, b.center);
        // the logprob ignores exploration noise
        assert_eq!(a.logprob, p.log_prob(&[1.0, 0.0, 0.0], &a.action));
    }

    #[test]
    fn realize_list_examples() {
        let params = toy_params(8, 3, 7);
        let mut flat = params.clone();
        flat.impression.params_mut().fill(0.0);
        let list = realize_list(&flat, &[0.0; 3], &[0.0; 8], 4).unwrap();
        assert_eq!(list, vec![0, 1, 2, 3]);

        // one-hot item rows, a large center on item 3's axis
        let mut onehot = ImpressionModel::zeros(1, 8, 8);
        for j in 0..8 {
            onehot.item_embedding_mut(j)[j] = 1.0;
        }
        let p = SimParams {
            impression: onehot,
            selection: params.selection.clone(),
        };
        let mut center = vec![0.0; 8];
        center[3] = 100.0;
        assert_eq!(realize_list(&p, &center, &[0.0; 8], 3).unwrap()[0], 3);
        assert!(realize_list(&p, &center, &[0.0; 8], 9).is_err());
    }

    #[test]
    fn random_list_frequencies_are_uniform() {
        let mut s = RandomStream::new(8);
        let mut counts = [0u32; 10];
        let draws = 100_000;
        for _ in 0..draws {
            for j in random_list(10, 3, &mut s).unwrap() {
                counts[j as usize] += 1;
            }
        }
        let p = 0.3;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!(
                (c as f64 - draws as f64 * p).abs() < 3.0 * sigma,
                "{counts:?}"
            );
        }
        let mut perm = random_list(6, 6, &mut s).unwrap();
        perm.sort();
        assert_eq!(perm, (0..6).collect::<Vec<u32>>());
        assert!(random_list(3, 4, &mut s).is_err());
        assert_eq!(
            random_list(50, 5, &mut RandomStream::new(1)).unwrap(),
            random_list(50, 5, &mut RandomStream::new(1)).unwrap()
        );
    }

    #[test]
    fn build_samples_counts() {
        let list = [10, 11, 12, 13, 14];
        let probs = [0.1, 0.4, 0.05, 0.3, 0.15];
        let b =
            build_samples(0, &list, &probs, Objective::Pairwise, 1, Provenance::Random).unwrap();
        assert_eq!(
            b.triplets(),
            vec![Triplet {
                user: 0,
                pos: 11,
                neg: 12
            }]
        );
        let b =
            build_samples(0, &list, &probs, Objective::Pairwise, 2, Provenance::Random).unwrap();
        assert_eq!(b.len(), 4);
        let b = build_samples(
            0,
            &list,
            &probs,
            Objective::Pointwise,
            2,
            Provenance::Random,
        )
        .unwrap();
        assert_eq!(b.points.iter().filter(|p| p.sample.label).count(), 2);
        assert_eq!(b.points.len(), 4);
        assert!(
            build_samples(0, &list, &probs, Objective::Pairwise, 3, Provenance::Random).is_err()
        );
        assert!(
            build_samples(0, &list, &probs, Objective::Pairwise, 0, Provenance::Random).is_err()
        );
    }

    #[test]
    fn unfiltered_counts() {
        let list = [1, 2, 3, 4, 5];
        let probs = [0.2; 5];
        let b = build_samples_unfiltered(
            0,
            &list,
            &[2, 4],
            &probs,
            Objective::Pairwise,
            Provenance::Random,
        )
        .unwrap();
        assert_eq!(b.len(), 6);
        let b = build_samples_unfiltered(
            0,
            &list,
            &[],
            &probs,
            Objective::Pairwise,
            Provenance::Random,
        )
        .unwrap();
        assert!(b.is_empty());
        let b = build_samples_unfiltered(
            0,
            &list,
            &list,
            &probs,
            Objective::Pointwise,
            Provenance::Random,
        )
        .unwrap();
        assert_eq!(b.points.iter().filter(|p| p.sample.label).count(), 5);
        assert!(build_samples_unfiltered(
            0,
            &list,
            &[9],
            &probs,
            Objective::Pairwise,
            Provenance::Random
        )
        .is_err());
    }

    fn random_steps(policy: &GaussianPolicy, n: usize, s: &mut RandomStream) -> Vec<PolicyStep> {
        (0..n)
            .map(|_| {
                let state = s.standard_normal_vec(policy.dim());
                let d = policy_sample(policy, &state, 0.0, s).unwrap();
                PolicyStep {
                    state,
                    action: d.action,
                    reward: s.standard_normal(),
                }
            })
            .collect()
    }

    #[test]
    fn surrogate_gradient_matches_finite_differences() {
        let mut s = RandomStream::new(9);
        for rep in 0..10 {
            let p = GaussianPolicy::initialized(3, 6, 0.7, &mut s).unwrap();
            let steps = random_steps(&p, 5, &mut s);
            let mut grad = vec![0.0; p.params().len()];
            p.surrogate(p.params(), &steps, Some(&mut grad));
            let err = finite_diff_check(
                |x| p.surrogate(x, &steps, None),
                p.params(),
                &grad,
                DEFAULT_FD_STEP,
            )
            .unwrap();
            assert!(err < 1e-4, "rep {rep}: {err}");
        }
    }

    #[test]
    fn equal_rewards_do_not_move_the_policy() {
        let p = GaussianPolicy::initialized(3, 4, 0.5, &mut RandomStream::new(10)).unwrap();
        let mut steps = random_steps(&p, 6, &mut RandomStream::new(11));
        for st in &mut steps {
            st.reward = 2.5;
        }
        assert_eq!(reinforce_update(&p, &steps, 0.1).unwrap(), p);
    }

    #[test]
    fn rewarded_action_becomes_more_likely() {
        let p = GaussianPolicy::initialized(3, 4, 0.5, &mut RandomStream::new(12)).unwrap();
        let mut steps = random_steps(&p, 2, &mut RandomStream::new(13));
        steps[0].reward = 1.0;
        steps[1].reward = 0.0;
        let before = p.log_prob(&steps[0].state, &steps[0].action);
        let q = reinforce_update(&p, &steps, 1e-3).unwrap();
        assert!(q.log_prob(&steps[0].state, &steps[0].action) > before);
    }

    #[test]
    fn reward_shift_leaves_update_unchanged() {
        let p = GaussianPolicy::initialized(3, 4, 0.5, &mut RandomStream::new(14)).unwrap();
        let steps = random_steps(&p, 6, &mut RandomStream::new(15));
        let shifted: Vec<PolicyStep> = steps
            .iter()
            .map(|s| PolicyStep {
                reward: s.reward + 1000.0,
                ..s.clone()
            })
            .collect();
        let a = reinforce_update(&p, &steps, 0.01).unwrap();
        let b = reinforce_update(&p, &shifted, 0.01).unwrap();
        for (x, y) in a.params().iter().zip(b.params()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn non_finite_rewards_are_rejected() {
        let p = GaussianPolicy::initialized(2, 2, 0.5, &mut RandomStream::new(0)).unwrap();
        let mut steps = random_steps(&p, 2, &mut RandomStream::new(1));
        steps[0].reward = f64::NAN;
        assert!(reinforce_update(&p, &steps, 0.1).is_err());
        assert!(reinforce_update(&p, &[], 0.1).is_err());
    }

    #[test]
    fn exploration_decays_linearly() {
        let e = ExplorationSchedule {
            start: 0.5,
            total: 10,
        };
        assert_eq!(e.std_at(0), 0.5);
        assert!((e.std_at(5) - 0.25).abs() < 1e-15);
        assert_eq!(e.std_at(10), 0.0);
    }

    fn round_fixture() -> (
        SimParams,
        VariationalPosterior,
        RankingModel,
        GaussianPolicy,
    ) {
        let params = toy_params(12, 3, 20);
        let posterior = VariationalPosterior::prior(12, 5);
        let target =
            RankingModel::initialized(ModelKind::BprMf, 4, 12, 3, &mut RandomStream::new(21))
                .unwrap();
        let policy = GaussianPolicy::initialized(3, 8, 0.3, &mut RandomStream::new(22)).unwrap();
        (params, posterior, target, policy)
    }

    fn spec(steps: usize) -> RoundSpec {
        RoundSpec {
            mode: InterventionMode::Learned,
            objective: Objective::Pairwise,
            list_len: 5,
            steps_per_user: steps,
            k: Some(2),
            select_m: 1,
            exploration: ExplorationSchedule {
                start: 0.5,
                total: 40,
            },
            first_episode: 0,
        }
    }

    #[test]
    fn round_outputs() {
        let (params, posterior, target, policy) = round_fixture();
        let users = [0, 1, 2, 3];
        let stream = RandomStream::new(23);
        let (b, e) = run_intervention_round(
            Some(&policy),
            &params,
            &posterior,
            &target,
            &users,
            &spec(0),
            &stream,
        )
        .unwrap();
        assert!(b.is_empty() && e.is_empty());

        let (b1, e1) = run_intervention_round(
            Some(&policy),
            &params,
            &posterior,
            &target,
            &users,
            &spec(3),
            &stream,
        )
        .unwrap();
        let (b2, e2) = run_intervention_round(
            Some(&policy),
            &params,
            &posterior,
            &target,
            &users,
            &spec(3),
            &stream,
        )
        .unwrap();
        assert_eq!(b1, b2);
        assert_eq!(e1, e2);
        assert_eq!(e1.len(), 12);
        for (batch, ep) in b1.iter().zip(&e1) {
            assert_eq!(
                ep.reward.to_bits(),
                loss_pairwise(&target, &batch.triplets()).to_bits()
            );
            assert_eq!(batch.len(), 4);
            let mut l = ep.list.clone();
            l.sort();
            l.dedup();
            assert_eq!(l.len(), 5);
        }

        let random = RoundSpec {
            mode: InterventionMode::Random,
            ..spec(2)
        };
        let (b, e) =
            run_intervention_round(None, &params, &posterior, &target, &users, &random, &stream)
                .unwrap();
        assert_eq!(b.len(), 8);
        assert!(e.is_empty());
        assert!(b.iter().all(|x| x.provenance == Provenance::Random));
    }

    #[test]
    fn tsv_export() {
        let b = build_samples(
            3,
            &[1, 2, 3, 4],
            &[0.1, 0.2, 0.3, 0.4],
            Objective::Pairwise,
            1,
            Provenance::Episode(7),
        )
        .unwrap();
        let mut out = Vec::new();
        write_batches_tsv(&[b], &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text, "# mode pairwise\nuser\tpos_item\tneg_item\tconfidence\tprovenance\n3\t4\t1\t0.4\tepisode:7\n");
    }

    #[test]
    fn policy_checkpoint_round_trip() {
        let p = GaussianPolicy::initialized(3, 4, 0.5, &mut RandomStream::new(5)).unwrap();
        let mut buf = Vec::new();
        p.to_matrix_file().write_to(&mut buf).unwrap();
        assert_eq!(
            GaussianPolicy::from_matrix_file(&MatrixFile::read_from(buf.as_slice()).unwrap())
                .unwrap(),
            p
        );
    }

    proptest! {
        #[test]
        fn batch_counts_are_exact(len in 2usize..9, seed in any::<u64>()) {
            let mut s = RandomStream::new(seed);
            let list: Vec<u32> = (0..len as u32).collect();
            let probs = crate::mathcore::softmax(&s.standard_normal_vec(len)).unwrap();
            for k in 1..=len / 2 {
                let b = build_samples(0, &list, &probs, Objective::Pairwise, k, Provenance::Random).unwrap();
                prop_assert_eq!(b.len(), k * k);
            }
            for m in 0..=len {
                let sel: Vec<u32> = list[..m].to_vec();
                let b = build_samples_unfiltered(0, &list, &sel, &probs, Objective::Pairwise, Provenance::Random).unwrap();
                prop_assert_eq!(b.len(), m * (len - m));
            }
        }

        #[test]
        fn confidence_gap_shrinks_with_k(len in 2usize..9, seed in any::<u64>()) {
            let mut s = RandomStream::new(seed);
            let list: Vec<u32> = (0..len as u32).collect();
            let probs = crate::mathcore::softmax(&s.standard_normal_vec(len)).unwrap();
            let mut last = f64::INFINITY;
            for k in 1..=len / 2 {
                let b = build_samples(0, &list, &probs, Objective::Pairwise, k, Provenance::Random).unwrap();
                let gap = b.pairs.iter().map(|p| p.pos_prob - p.neg_prob).fold(f64::INFINITY, f64::min);
                prop_assert!(gap <= last);
                last = gap;
            }
        }

        #[test]
        fn realized_lists_are_distinct_and_in_range(seed in any::<u64>(), k in 1usize..12) {
            let params = toy_params(12, 3, seed);
            let mut s = RandomStream::new(seed);
            let center = s.standard_normal_vec(3);
            let alpha = s.standard_normal_vec(12);
            let list = realize_list(&params, &center, &alpha, k).unwrap();
            let mut d = list.clone();
            d.sort();
            d.dedup();
            prop_assert_eq!(d.len(), k);
            prop_assert!(list.iter().all(|&j| j < 12));
        }
    }
}
