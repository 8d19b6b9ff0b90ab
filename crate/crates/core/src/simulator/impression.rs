use crate::corpus::InteractionLog;
use crate::error::{Error, Result};
use crate::matfile::MatrixFile;
use crate::mathcore::{dot, log_sigmoid, sigmoid, AdamConfig, AdamState, RandomStream, Segment};

pub(crate) const EMBED_INIT_STD: f64 = 0.1;
pub(crate) const WEIGHT_INIT: f64 = 0.1;

/// Impression equation parameters `{P, Q, w^R}` in one flat vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ImpressionModel {
    user: Segment,
    item: Segment,
    weight: Segment,
    params: Vec<f64>,
}

impl ImpressionModel {
    pub fn zeros(n_users: usize, n_items: usize, dim: usize) -> Self {
        let ([user, item, weight], len) =
            Segment::layout([(n_users, dim), (n_items, dim), (1, n_items)]);
        ImpressionModel {
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
        stream: &mut RandomStream,
    ) -> Self {
        let mut m = Self::zeros(n_users, n_items, dim);
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

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn user_embedding(&self, u: usize) -> &[f64] {
        self.user.row(&self.params, u)
    }

    pub fn user_embedding_mut(&mut self, u: usize) -> &mut [f64] {
        self.user.row_mut(&mut self.params, u)
    }

    pub fn item_embedding(&self, j: usize) -> &[f64] {
        self.item.row(&self.params, j)
    }

    pub fn item_embedding_mut(&mut self, j: usize) -> &mut [f64] {
        self.item.row_mut(&mut self.params, j)
    }

    pub fn weight(&self, j: usize) -> f64 {
        self.params[self.weight.offset + j]
    }

    pub fn set_weight(&mut self, j: usize, value: f64) {
        self.params[self.weight.offset + j] = value;
    }

    pub(crate) fn logit(&self, params: &[f64], u: usize, j: usize, alpha_j: f64) -> f64 {
        dot(self.user.row(params, u), self.item.row(params, j))
            + params[self.weight.offset + j] * alpha_j
    }

    /// Negative-sampling objective averaged over alpha draws and records,
    /// negated so that it is minimized. Accumulates its gradient into `grad`
    /// when given.
    pub fn objective(
        &self,
        params: &[f64],
        batch: &ImpressionBatch,
        alphas: &[Vec<f64>],
        mut grad: Option<&mut [f64]>,
    ) -> f64 {
        if batch.examples.is_empty() || alphas.is_empty() {
            return 0.0;
        }
        let scale = 1.0 / (alphas.len() as f64 * batch.records.max(1) as f64);
        let dim = self.dim();
        let mut total = 0.0;
        for alpha in alphas {
            for &(u, j, shown) in &batch.examples {
                let (u, j) = (u as usize, j as usize);
                let l = self.logit(params, u, j, alpha[j]);
                let (ll, dl) = if shown {
                    (log_sigmoid(l), 1.0 - sigmoid(l))
                } else {
                    (log_sigmoid(-l), -sigmoid(l))
                };
                total -= ll;
                if let Some(g) = grad.as_deref_mut() {
                    let coef = -dl * scale;
                    let pu = self.user.offset + u * dim;
                    let qj = self.item.offset + j * dim;
                    for k in 0..dim {
                        g[pu + k] += coef * params[qj + k];
                        g[qj + k] += coef * params[pu + k];
                    }
                    g[self.weight.offset + j] += coef * alpha[j];
                }
            }
        }
        total * scale
    }

    pub(crate) fn write_matrices(&self, f: &mut MatrixFile) {
        f.push_matrix("impression_user", self.user.to_matrix(&self.params))
            .push_matrix("impression_item", self.item.to_matrix(&self.params))
            .push_vector("impression_weight", self.weight.slice(&self.params));
    }

    pub(crate) fn read_matrices(f: &MatrixFile) -> Result<Self> {
        let user = f.require_matrix("impression_user")?;
        let item = f.require_matrix("impression_item")?;
        let weight = f.require_vector("impression_weight")?;
        if user.cols() != item.cols() || weight.len() != item.rows() {
            return Err(Error::parse(
                0,
                "impression matrices have inconsistent shapes",
            ));
        }
        let mut m = Self::zeros(user.rows(), item.rows(), user.cols());
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

/// Shown items (label `true`) and sampled never-shown items (`false`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImpressionBatch {
    pub examples: Vec<(u32, u32, bool)>,
    /// Number of records the examples came from.
    pub records: usize,
}

impl ImpressionBatch {
    /// Every shown item of the given records plus `negatives` items per shown
    /// item drawn uniformly from the items absent from that record.
    pub fn from_records(
        log: &InteractionLog,
        record_ids: &[usize],
        negatives: usize,
        stream: &mut RandomStream,
    ) -> Self {
        let n_items = log.n_items();
        let mut examples = Vec::new();
        for &i in record_ids {
            let r = &log.records()[i];
            for &j in &r.items {
                examples.push((r.user, j, true));
            }
            if r.len() >= n_items {
                continue;
            }
            for _ in 0..negatives * r.len() {
                let neg = loop {
                    let cand = stream.index(n_items) as u32;
                    if !r.items.contains(&cand) {
                        break cand;
                    }
                };
                examples.push((r.user, neg, false));
            }
        }
        ImpressionBatch {
            examples,
            records: record_ids.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImpressionHyper {
    pub dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub negatives: usize,
    pub alpha_draws: usize,
    pub batch_size: usize,
}

impl Default for ImpressionHyper {
    fn default() -> Self {
        ImpressionHyper {
            dim: 32,
            learning_rate: 1e-2,
            epochs: 10,
            negatives: 4,
            alpha_draws: 2,
            batch_size: 256,
        }
    }
}

/// Fits `{P, Q, w^R}` by mini-batch Adam on the negative-sampling
/// objective, redrawing `α ~ N(0, I)` for every batch.
pub fn train_impression_model(
    log: &InteractionLog,
    hyper: &ImpressionHyper,
    stream: &mut RandomStream,
) -> Result<ImpressionModel> {
    let mut init = stream.derive("init");
    let mut model =
        ImpressionModel::initialized(log.n_users(), log.n_items(), hyper.dim, &mut init);
    let mut adam = AdamState::new(model.params.len(), AdamConfig::with_lr(hyper.learning_rate));
    let mut grad = vec![0.0; model.params.len()];
    let mut order: Vec<usize> = (0..log.records().len()).collect();
    let batch_size = hyper.batch_size.max(1);
    for epoch in 0..hyper.epochs {
        let mut epoch_stream = stream.derive_indexed("epoch", epoch as u64);
        epoch_stream.shuffle(&mut order);
        for chunk in order.chunks(batch_size) {
            let batch =
                ImpressionBatch::from_records(log, chunk, hyper.negatives, &mut epoch_stream);
            let alphas: Vec<Vec<f64>> = (0..hyper.alpha_draws.max(1))
                .map(|_| epoch_stream.standard_normal_vec(log.n_items()))
                .collect();
            grad.fill(0.0);
            let loss = model.objective(&model.params, &batch, &alphas, Some(&mut grad));
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    message: "impression loss is not finite".into(),
                });
            }
            adam.step(&mut model.params, &grad)?;
        }
        log::debug!("impression epoch {epoch} done");
    }
    Ok(model)
}
