use crate::corpus::{InteractionLog, Record};
use crate::error::{Error, Result};
use crate::matfile::MatrixFile;
use crate::mathcore::{dot, softmax, AdamConfig, AdamState, RandomStream, Segment};

use super::impression::{EMBED_INIT_STD, WEIGHT_INIT};

/// Selection equation parameters `{X, Y, w^S}`; `w^S` has one entry per
/// list slot.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionModel {
    user: Segment,
    item: Segment,
    weight: Segment,
    params: Vec<f64>,
}

impl SelectionModel {
    pub fn zeros(n_users: usize, n_items: usize, dim: usize, slots: usize) -> Self {
        let ([user, item, weight], len) =
            Segment::layout([(n_users, dim), (n_items, dim), (1, slots)]);
        SelectionModel {
            user,
            item,
            weight,
            params: vec![0.0; len],
        }
    }

    pub fn initialized(
        n_users: usize,
        n_items: usize,
        dim: usize,
        slots: usize,
        stream: &mut RandomStream,
    ) -> Self {
        let mut m = Self::zeros(n_users, n_items, dim, slots);
        for x in &mut m.params[m.user.offset..m.item.end()] {
            *x = EMBED_INIT_STD * stream.standard_normal();
        }
        m.weight.slice_mut(&mut m.params).fill(WEIGHT_INIT);
        m
    }

    pub fn n_users(&self) -> usize {
        self.user.rows
    }

    pub fn n_items(&self) -> usize {
        self.item.rows
    }

    pub fn dim(&self) -> usize {
        self.user.cols
    }

    pub fn slots(&self) -> usize {
        self.weight.cols
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn user_embedding_mut(&mut self, u: usize) -> &mut [f64] {
        self.user.row_mut(&mut self.params, u)
    }

    pub fn item_embedding_mut(&mut self, j: usize) -> &mut [f64] {
        self.item.row_mut(&mut self.params, j)
    }

    pub fn weight(&self, t: usize) -> f64 {
        self.params[self.weight.offset + t]
    }

    pub fn set_weight(&mut self, t: usize, value: f64) {
        self.params[self.weight.offset + t] = value;
    }

    /// `X_uᵀY_j`, the part of a slot logit that does not depend on `β`.
    pub fn affinity(&self, u: usize, j: usize) -> f64 {
        dot(
            self.user.row(&self.params, u),
            self.item.row(&self.params, j),
        )
    }

    pub(crate) fn logit(&self, params: &[f64], u: usize, j: usize, t: usize, beta_t: f64) -> f64 {
        dot(self.user.row(params, u), self.item.row(params, j))
            + params[self.weight.offset + t] * beta_t
    }

    /// Negative within-list log-likelihood of the selected slots, averaged
    /// over beta draws and over records with at least one selection.
    pub fn objective(
        &self,
        params: &[f64],
        records: &[&Record],
        betas: &[Vec<f64>],
        mut grad: Option<&mut [f64]>,
    ) -> f64 {
        let used: Vec<&&Record> = records.iter().filter(|r| r.has_selection()).collect();
        if used.is_empty() || betas.is_empty() {
            return 0.0;
        }
        let scale = 1.0 / (betas.len() * used.len()) as f64;
        let dim = self.dim();
        let mut total = 0.0;
        let mut logits = Vec::new();
        for beta in betas {
            for r in &used {
                let u = r.user as usize;
                logits.clear();
                logits.extend(
                    r.items
                        .iter()
                        .enumerate()
                        .map(|(t, &j)| self.logit(params, u, j as usize, t, beta[t])),
                );
                let probs = softmax(&logits).expect("finite selection logits");
                let n_sel = r.selected.iter().filter(|&&s| s).count() as f64;
                for t in r.selected_slots() {
                    total -= probs[t].ln();
                }
                if let Some(g) = grad.as_deref_mut() {
                    let pu = self.user.offset + u * dim;
                    for (t, &j) in r.items.iter().enumerate() {
                        // d(-ll)/dlogit_t = n_sel·p_t − 1[t selected]
                        let d = (n_sel * probs[t] - if r.selected[t] { 1.0 } else { 0.0 }) * scale;
                        if d == 0.0 {
                            continue;
                        }
                        let yj = self.item.offset + j as usize * dim;
                        for k in 0..dim {
                            g[pu + k] += d * params[yj + k];
                            g[yj + k] += d * params[pu + k];
                        }
                        g[self.weight.offset + t] += d * beta[t];
                    }
                }
            }
        }
        total * scale
    }

    pub(crate) fn write_matrices(&self, f: &mut MatrixFile) {
        f.push_matrix("selection_user", self.user.to_matrix(&self.params))
            .push_matrix("selection_item", self.item.to_matrix(&self.params))
            .push_vector("selection_weight", self.weight.slice(&self.params));
    }

    pub(crate) fn read_matrices(f: &MatrixFile) -> Result<Self> {
        let user = f.require_matrix("selection_user")?;
        let item = f.require_matrix("selection_item")?;
        let weight = f.require_vector("selection_weight")?;
        if user.cols() != item.cols() {
            return Err(Error::parse(
                0,
                "selection matrices have inconsistent shapes",
            ));
        }
        let mut m = Self::zeros(user.rows(), item.rows(), user.cols(), weight.len());
        m.user
            .slice_mut(&mut m.params)
            .copy_from_slice(user.as_slice());
        m.item
            .slice_mut(&mut m.params)
            .copy_from_slice(item.as_slice());
        m.weight.slice_mut(&mut m.params).copy_from_slice(&weight);
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionHyper {
    pub dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub beta_draws: usize,
    pub batch_size: usize,
}

impl Default for SelectionHyper {
    fn default() -> Self {
        SelectionHyper {
            dim: 32,
            learning_rate: 1e-2,
            epochs: 10,
            beta_draws: 2,
            batch_size: 256,
        }
    }
}

/// Fits `{X, Y, w^S}` by maximizing the exact within-list softmax
/// likelihood. Records without any selection carry no signal and are skipped.
pub fn train_selection_model(
    log: &InteractionLog,
    hyper: &SelectionHyper,
    stream: &mut RandomStream,
) -> Result<SelectionModel> {
    let slots = log.max_list_len();
    let mut init = stream.derive("init");
    let mut model =
        SelectionModel::initialized(log.n_users(), log.n_items(), hyper.dim, slots, &mut init);
    let mut adam = AdamState::new(model.params.len(), AdamConfig::with_lr(hyper.learning_rate));
    let mut grad = vec![0.0; model.params.len()];
    let mut order: Vec<usize> = log
        .records()
        .iter()
        .enumerate()
        .filter(|(_, r)| r.has_selection())
        .map(|(i, _)| i)
        .collect();
    let batch_size = hyper.batch_size.max(1);
    for epoch in 0..hyper.epochs {
        let mut epoch_stream = stream.derive_indexed("epoch", epoch as u64);
        epoch_stream.shuffle(&mut order);
        for chunk in order.chunks(batch_size) {
            let batch: Vec<&Record> = chunk.iter().map(|&i| &log.records()[i]).collect();
            let betas: Vec<Vec<f64>> = (0..hyper.beta_draws.max(1))
                .map(|_| epoch_stream.standard_normal_vec(slots))
                .collect();
            grad.fill(0.0);
            let loss = model.objective(&model.params, &batch, &betas, Some(&mut grad));
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    message: "selection loss is not finite".into(),
                });
            }
            adam.step(&mut model.params, &grad)?;
        }
    }
    Ok(model)
}
