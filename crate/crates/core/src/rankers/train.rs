use crate::corpus::InteractionLog;
use crate::error::{Error, Result};
use crate::mathcore::{log_sigmoid, sigmoid, AdamConfig, AdamState, RandomStream};

use super::{Labeled, ModelKind, Objective, RankingModel, Tape, Triplet};

#[derive(Clone, Debug, PartialEq)]
pub struct RankerHyper {
    pub dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub l2: f64,
    /// Sampled negatives per observed positive for the pointwise loss.
    pub negatives: usize,
    pub knn_k: usize,
    /// Overrides the kind's default objective.
    pub objective: Option<Objective>,
}

impl Default for RankerHyper {
    fn default() -> Self {
        RankerHyper {
            dim: 64,
            learning_rate: 1e-3,
            epochs: 20,
            batch_size: 512,
            l2: 1e-3,
            negatives: 4,
            knn_k: 20,
            objective: None,
        }
    }
}

/// Observed positives with per-user lookups for negative sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservedData {
    n_items: usize,
    positives: Vec<(u32, u32)>,
    user_pos: Vec<Vec<u32>>,
}

impl ObservedData {
    pub fn from_log(log: &InteractionLog) -> Self {
        let user_pos: Vec<Vec<u32>> = log
            .user_positives()
            .into_iter()
            .map(|s| s.into_iter().collect())
            .collect();
        let positives = user_pos
            .iter()
            .enumerate()
            .flat_map(|(u, items)| items.iter().map(move |&i| (u as u32, i)))
            .collect();
        ObservedData {
            n_items: log.n_items(),
            positives,
            user_pos,
        }
    }

    pub fn len(&self) -> usize {
        self.positives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty()
    }

    pub fn user_positives(&self, u: usize) -> &[u32] {
        &self.user_pos[u]
    }

    /// Uniform draw from `I \ I_u⁺`, or `None` when the user liked everything.
    pub fn sample_negative(&self, u: usize, stream: &mut RandomStream) -> Option<u32> {
        let pos = &self.user_pos[u];
        if pos.len() >= self.n_items {
            return None;
        }
        loop {
            let j = stream.index(self.n_items) as u32;
            if pos.binary_search(&j).is_err() {
                return Some(j);
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum TrainSource<'a> {
    /// Observed positives with negatives redrawn every epoch. `per_epoch`
    /// subsamples that many positives per epoch.
    Observed {
        data: &'a ObservedData,
        per_epoch: Option<usize>,
    },
    Triplets(&'a [Triplet]),
    Labeled(&'a [Labeled]),
}

/// One training example of either objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Example {
    Pair(Triplet),
    Point(Labeled),
}

fn assemble(
    sources: &[TrainSource<'_>],
    objective: Objective,
    negatives: usize,
    stream: &mut RandomStream,
) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for source in sources {
        match *source {
            TrainSource::Observed { data, per_epoch } => {
                let picks: Vec<usize> = match per_epoch {
                    Some(n) if n < data.len() => stream.sample_distinct(data.len(), n),
                    _ => (0..data.len()).collect(),
                };
                for p in picks {
                    let (u, i) = data.positives[p];
                    match objective {
                        Objective::Pairwise => {
                            if let Some(j) = data.sample_negative(u as usize, stream) {
                                out.push(Example::Pair(Triplet {
                                    user: u,
                                    pos: i,
                                    neg: j,
                                }));
                            }
                        }
                        Objective::Pointwise => {
                            out.push(Example::Point(Labeled {
                                user: u,
                                item: i,
                                label: true,
                            }));
                            for _ in 0..negatives {
                                if let Some(j) = data.sample_negative(u as usize, stream) {
                                    out.push(Example::Point(Labeled {
                                        user: u,
                                        item: j,
                                        label: false,
                                    }));
                                }
                            }
                        }
                    }
                }
            }
            TrainSource::Triplets(ts) => match objective {
                Objective::Pairwise => out.extend(ts.iter().map(|&t| Example::Pair(t))),
                Objective::Pointwise => {
                    for t in ts {
                        out.push(Example::Point(Labeled {
                            user: t.user,
                            item: t.pos,
                            label: true,
                        }));
                        out.push(Example::Point(Labeled {
                            user: t.user,
                            item: t.neg,
                            label: false,
                        }));
                    }
                }
            },
            TrainSource::Labeled(ls) => match objective {
                Objective::Pointwise => out.extend(ls.iter().map(|&l| Example::Point(l))),
                Objective::Pairwise => {
                    return Err(Error::domain(
                        "labeled samples cannot feed a pairwise objective",
                    ));
                }
            },
        }
    }
    Ok(out)
}

fn add_square(
    params: &[f64],
    range: std::ops::Range<usize>,
    coef: f64,
    grad: &mut Option<&mut [f64]>,
) -> f64 {
    if let Some(g) = grad.as_deref_mut() {
        for k in range.clone() {
            g[k] += coef * params[k];
        }
    }
    0.5 * coef * params[range].iter().map(|x| x * x).sum::<f64>()
}

impl RankingModel {
    /// Mean loss over the batch plus L2 on the embedding rows each example
    /// touches and on the dense tower weights.
    pub fn batch_objective(
        &self,
        params: &[f64],
        batch: &[Example],
        l2: f64,
        mut grad: Option<&mut [f64]>,
    ) -> f64 {
        if batch.is_empty() {
            return 0.0;
        }
        let scale = 1.0 / batch.len() as f64;
        let (mut ta, mut tb) = (Tape::default(), Tape::default());
        let mut total = 0.0;
        for ex in batch {
            let (u, items): (usize, &[u32]) = match ex {
                Example::Pair(t) => {
                    let (u, i, j) = (t.user as usize, t.pos as usize, t.neg as usize);
                    let m =
                        self.forward(params, u, i, &mut ta) - self.forward(params, u, j, &mut tb);
                    total -= scale * log_sigmoid(m);
                    if let Some(g) = grad.as_deref_mut() {
                        let c = -sigmoid(-m) * scale;
                        self.backward(params, u, i, &ta, c, g);
                        self.backward(params, u, j, &tb, -c, g);
                    }
                    (u, &[t.pos, t.neg][..])
                }
                Example::Point(s) => {
                    let (u, i) = (s.user as usize, s.item as usize);
                    let z = self.forward(params, u, i, &mut ta);
                    let (ll, c) = if s.label {
                        (log_sigmoid(z), -sigmoid(-z))
                    } else {
                        (log_sigmoid(-z), sigmoid(z))
                    };
                    total -= scale * ll;
                    if let Some(g) = grad.as_deref_mut() {
                        self.backward(params, u, i, &ta, c * scale, g);
                    }
                    (u, std::slice::from_ref(&s.item))
                }
            };
            if l2 > 0.0 {
                for r in self.user_rows(u) {
                    total += add_square(params, r, l2 * scale, &mut grad);
                }
                for &i in items {
                    for r in self.item_rows(i as usize) {
                        total += add_square(params, r, l2 * scale, &mut grad);
                    }
                }
            }
        }
        if l2 > 0.0 {
            for r in self.dense_blocks() {
                total += add_square(params, r, l2, &mut grad);
            }
        }
        total
    }
}

fn train(
    mut model: RankingModel,
    sources: &[TrainSource<'_>],
    hyper: &RankerHyper,
    objective: Objective,
    stream: &mut RandomStream,
) -> Result<RankingModel> {
    if !model.kind.is_trainable() {
        return Err(Error::domain(format!(
            "{} is not gradient-trained",
            model.kind
        )));
    }
    let mut adam = AdamState::new(model.params.len(), AdamConfig::with_lr(hyper.learning_rate));
    let mut grad = vec![0.0; model.params.len()];
    let batch_size = hyper.batch_size.max(1);
    for epoch in 0..hyper.epochs {
        let mut es = stream.derive_indexed("epoch", epoch as u64);
        let mut examples = assemble(sources, objective, hyper.negatives, &mut es)?;
        es.shuffle(&mut examples);
        let mut epoch_loss = 0.0;
        for chunk in examples.chunks(batch_size) {
            grad.fill(0.0);
            let loss = model.batch_objective(&model.params, chunk, hyper.l2, Some(&mut grad));
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    message: format!("{} {objective} loss is not finite", model.kind),
                });
            }
            epoch_loss += loss * chunk.len() as f64;
            adam.step(&mut model.params, &grad)?;
        }
        log::debug!(
            "{} epoch {epoch}: mean loss {:.5}",
            model.kind,
            epoch_loss / examples.len().max(1) as f64
        );
    }
    Ok(model)
}

/// Minimizes `−Σ log σ(f(u,i) − f(u,j))` plus L2.
pub fn train_pairwise(
    model: RankingModel,
    sources: &[TrainSource<'_>],
    hyper: &RankerHyper,
    stream: &mut RandomStream,
) -> Result<RankingModel> {
    train(model, sources, hyper, Objective::Pairwise, stream)
}

/// Minimizes the binary cross-entropy of `σ(f(u,i))` plus L2.
pub fn train_pointwise(
    model: RankingModel,
    sources: &[TrainSource<'_>],
    hyper: &RankerHyper,
    stream: &mut RandomStream,
) -> Result<RankingModel> {
    train(model, sources, hyper, Objective::Pointwise, stream)
}

/// Builds and fits a model of any kind on the observed training log.
pub fn train_model(
    kind: ModelKind,
    train_log: &InteractionLog,
    hyper: &RankerHyper,
    stream: &mut RandomStream,
) -> Result<RankingModel> {
    match kind {
        ModelKind::ItemPop => Ok(RankingModel::item_pop(train_log)),
        ModelKind::ItemKnn => Ok(RankingModel::item_knn(train_log, hyper.knn_k)),
        _ => {
            let model = RankingModel::initialized(
                kind,
                train_log.n_users(),
                train_log.n_items(),
                hyper.dim,
                &mut stream.derive("init"),
            )?;
            let data = ObservedData::from_log(train_log);
            let sources = [TrainSource::Observed {
                data: &data,
                per_epoch: None,
            }];
            let objective = hyper.objective.unwrap_or(kind.default_objective());
            train(
                model,
                &sources,
                hyper,
                objective,
                &mut stream.derive("train"),
            )
        }
    }
}
