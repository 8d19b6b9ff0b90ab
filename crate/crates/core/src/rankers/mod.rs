//! Target ranking models: BPR-MF, GMF, MLP and NeuMF trained on pairwise or
//! pointwise losses, plus the ItemPop and ItemKNN baselines.

mod train;

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::corpus::InteractionLog;
use crate::error::{Error, Result};
use crate::matfile::MatrixFile;
use crate::mathcore::{dot, log_sigmoid, Matrix, RandomStream, Segment};

pub use train::{
    train_model, train_pairwise, train_pointwise, Example, ObservedData, RankerHyper, TrainSource,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    BprMf,
    Gmf,
    Mlp,
    NeuMf,
    ItemPop,
    ItemKnn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::BprMf,
        ModelKind::Gmf,
        ModelKind::Mlp,
        ModelKind::NeuMf,
        ModelKind::ItemPop,
        ModelKind::ItemKnn,
    ];

    pub fn is_trainable(self) -> bool {
        !matches!(self, ModelKind::ItemPop | ModelKind::ItemKnn)
    }

    /// BPR-MF is fit on the pairwise loss, the neural models on the
    /// pointwise one.
    pub fn default_objective(self) -> Objective {
        match self {
            ModelKind::BprMf => Objective::Pairwise,
            _ => Objective::Pointwise,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ModelKind::BprMf => "bpr-mf",
            ModelKind::Gmf => "gmf",
            ModelKind::Mlp => "mlp",
            ModelKind::NeuMf => "neumf",
            ModelKind::ItemPop => "itempop",
            ModelKind::ItemKnn => "itemknn",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bpr-mf" | "bpr" | "mf" => Ok(ModelKind::BprMf),
            "gmf" => Ok(ModelKind::Gmf),
            "mlp" => Ok(ModelKind::Mlp),
            "neumf" => Ok(ModelKind::NeuMf),
            "itempop" | "pop" => Ok(ModelKind::ItemPop),
            "itemknn" | "knn" => Ok(ModelKind::ItemKnn),
            _ => Err(Error::Config(format!("unknown model kind `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Objective {
    Pairwise,
    Pointwise,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Pairwise => "pairwise",
            Objective::Pointwise => "pointwise",
        })
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pairwise" => Ok(Objective::Pairwise),
            "pointwise" => Ok(Objective::Pointwise),
            _ => Err(Error::Config(format!("unknown objective `{s}`"))),
        }
    }
}

/// `user` prefers `pos` over `neg`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub user: u32,
    pub pos: u32,
    pub neg: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Labeled {
    pub user: u32,
    pub item: u32,
    pub label: bool,
}

/// Parameter blocks inside the flat vector. Blocks a kind does not use stay
/// `None`.
#[derive(Clone, Debug, Default, PartialEq)]
struct Layout {
    gmf_user: Option<Segment>,
    gmf_item: Option<Segment>,
    mlp_user: Option<Segment>,
    mlp_item: Option<Segment>,
    w1: Option<Segment>,
    b1: Option<Segment>,
    w2: Option<Segment>,
    b2: Option<Segment>,
    out: Option<Segment>,
}

impl Layout {
    fn new(kind: ModelKind, n_users: usize, n_items: usize, d: usize) -> (Layout, usize) {
        let h2 = mlp_out_width(d);
        let mut offset = 0;
        let mut take = |rows: usize, cols: usize| {
            let s = Segment { offset, rows, cols };
            offset += rows * cols;
            Some(s)
        };
        let mut l = Layout::default();
        let (gmf, mlp) = match kind {
            ModelKind::BprMf | ModelKind::Gmf => (true, false),
            ModelKind::Mlp => (false, true),
            ModelKind::NeuMf => (true, true),
            ModelKind::ItemPop | ModelKind::ItemKnn => (false, false),
        };
        if gmf {
            l.gmf_user = take(n_users, d);
            l.gmf_item = take(n_items, d);
        }
        if mlp {
            l.mlp_user = take(n_users, d);
            l.mlp_item = take(n_items, d);
            l.w1 = take(d, 2 * d);
            l.b1 = take(1, d);
            l.w2 = take(h2, d);
            l.b2 = take(1, h2);
        }
        l.out = match kind {
            ModelKind::Gmf => take(1, d),
            ModelKind::Mlp => take(1, h2),
            ModelKind::NeuMf => take(1, d + h2),
            _ => None,
        };
        (l, offset)
    }

    fn named(&self) -> [(&'static str, Option<Segment>); 9] {
        [
            ("gmf_user", self.gmf_user),
            ("gmf_item", self.gmf_item),
            ("mlp_user", self.mlp_user),
            ("mlp_item", self.mlp_item),
            ("w1", self.w1),
            ("b1", self.b1),
            ("w2", self.w2),
            ("b2", self.b2),
            ("out", self.out),
        ]
    }

    /// Tower and output parameters, regularized once per batch.
    fn dense(&self) -> impl Iterator<Item = Segment> {
        [self.w1, self.b1, self.w2, self.b2, self.out]
            .into_iter()
            .flatten()
    }
}

fn mlp_out_width(d: usize) -> usize {
    (d / 2).max(1)
}

#[derive(Clone, Debug, PartialEq)]
enum Memory {
    None,
    /// Training-positive counts per item.
    Popularity(Vec<f64>),
    Knn {
        /// Per item, its retained neighbours and their similarities.
        neighbors: Vec<Vec<(u32, f64)>>,
        /// Sorted training positives per user.
        user_pos: Vec<Vec<u32>>,
        k: usize,
    },
}

/// Scratch space for one forward pass of the MLP tower.
#[derive(Clone, Debug, Default)]
pub(crate) struct Tape {
    x: Vec<f64>,
    a1: Vec<f64>,
    z1: Vec<f64>,
    a2: Vec<f64>,
    z2: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankingModel {
    kind: ModelKind,
    n_users: usize,
    n_items: usize,
    dim: usize,
    layout: Layout,
    params: Vec<f64>,
    memory: Memory,
}

const EMBED_INIT_STD: f64 = 0.1;

impl RankingModel {
    /// All-zero parameters for a trainable kind.
    pub fn zeros(kind: ModelKind, n_users: usize, n_items: usize, dim: usize) -> Result<Self> {
        if !kind.is_trainable() {
            return Err(Error::domain(format!("{kind} has no trainable parameters")));
        }
        if dim == 0 {
            return Err(Error::domain("embedding size must be positive"));
        }
        let (layout, len) = Layout::new(kind, n_users, n_items, dim);
        Ok(RankingModel {
            kind,
            n_users,
            n_items,
            dim,
            layout,
            params: vec![0.0; len],
            memory: Memory::None,
        })
    }

    /// Gaussian embeddings, He-initialized tower and unit GMF output weights.
    pub fn initialized(
        kind: ModelKind,
        n_users: usize,
        n_items: usize,
        dim: usize,
        stream: &mut RandomStream,
    ) -> Result<Self> {
        let mut m = Self::zeros(kind, n_users, n_items, dim)?;
        let l = m.layout.clone();
        for seg in [l.gmf_user, l.gmf_item, l.mlp_user, l.mlp_item]
            .into_iter()
            .flatten()
        {
            for x in seg.slice_mut(&mut m.params) {
                *x = EMBED_INIT_STD * stream.standard_normal();
            }
        }
        for seg in [l.w1, l.w2].into_iter().flatten() {
            let std = (2.0 / seg.cols as f64).sqrt();
            for x in seg.slice_mut(&mut m.params) {
                *x = std * stream.standard_normal();
            }
        }
        if let Some(out) = l.out {
            let h2 = mlp_out_width(dim);
            let o = out.slice_mut(&mut m.params);
            match kind {
                ModelKind::Gmf => o.fill(1.0),
                ModelKind::Mlp => o
                    .iter_mut()
                    .for_each(|x| *x = stream.standard_normal() / (h2 as f64).sqrt()),
                ModelKind::NeuMf => {
                    o[..dim].fill(1.0);
                    o[dim..]
                        .iter_mut()
                        .for_each(|x| *x = stream.standard_normal() / (h2 as f64).sqrt());
                }
                _ => {}
            }
        }
        Ok(m)
    }

    /// ItemPop: scores are training-positive counts.
    pub fn item_pop(train: &InteractionLog) -> Self {
        let counts = train
            .item_positive_counts()
            .into_iter()
            .map(|c| c as f64)
            .collect();
        Self::memory_model(
            ModelKind::ItemPop,
            train.n_users(),
            train.n_items(),
            Memory::Popularity(counts),
        )
    }

    /// ItemKNN over cosine similarity of the binary user-item matrix, keeping
    /// the `k` most similar other items per item.
    pub fn item_knn(train: &InteractionLog, k: usize) -> Self {
        let user_pos: Vec<Vec<u32>> = train
            .user_positives()
            .into_iter()
            .map(|s| s.into_iter().collect())
            .collect();
        let n_items = train.n_items();
        let mut item_users: Vec<Vec<u32>> = vec![Vec::new(); n_items];
        for (u, items) in user_pos.iter().enumerate() {
            for &i in items {
                item_users[i as usize].push(u as u32);
            }
        }
        let mut co = vec![0u32; n_items];
        let mut touched = Vec::new();
        let mut neighbors = Vec::with_capacity(n_items);
        for i in 0..n_items {
            for &u in &item_users[i] {
                for &j in &user_pos[u as usize] {
                    if j as usize != i {
                        if co[j as usize] == 0 {
                            touched.push(j);
                        }
                        co[j as usize] += 1;
                    }
                }
            }
            let ni = item_users[i].len() as f64;
            let mut sims: Vec<(u32, f64)> = touched
                .iter()
                .map(|&j| {
                    let nj = item_users[j as usize].len() as f64;
                    (j, co[j as usize] as f64 / (ni * nj).sqrt())
                })
                .collect();
            for &j in &touched {
                co[j as usize] = 0;
            }
            touched.clear();
            sims.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            sims.truncate(k);
            neighbors.push(sims);
        }
        Self::memory_model(
            ModelKind::ItemKnn,
            train.n_users(),
            n_items,
            Memory::Knn {
                neighbors,
                user_pos,
                k,
            },
        )
    }

    /// ItemKNN from a precomputed similarity table. Each item keeps its `k`
    /// largest nonzero entries, itself included when its diagonal is nonzero.
    pub fn item_knn_from_similarity(
        similarity: &Matrix,
        k: usize,
        user_positives: &[BTreeSet<u32>],
    ) -> Result<Self> {
        let n_items = similarity.rows();
        if similarity.cols() != n_items {
            return Err(Error::domain("similarity table must be square"));
        }
        let neighbors = (0..n_items)
            .map(|i| {
                let mut row: Vec<(u32, f64)> = similarity
                    .row(i)
                    .iter()
                    .enumerate()
                    .filter(|(_, &s)| s != 0.0)
                    .map(|(j, &s)| (j as u32, s))
                    .collect();
                row.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                row.truncate(k);
                row
            })
            .collect();
        let user_pos = user_positives
            .iter()
            .map(|s| s.iter().copied().collect())
            .collect();
        Ok(Self::memory_model(
            ModelKind::ItemKnn,
            user_positives.len(),
            n_items,
            Memory::Knn {
                neighbors,
                user_pos,
                k,
            },
        ))
    }

    fn memory_model(kind: ModelKind, n_users: usize, n_items: usize, memory: Memory) -> Self {
        RankingModel {
            kind,
            n_users,
            n_items,
            dim: 0,
            layout: Layout::default(),
            params: Vec::new(),
            memory,
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Output (fusion) weights, empty for BPR-MF and the memory baselines.
    pub fn output_weights_mut(&mut self) -> &mut [f64] {
        match self.layout.out {
            Some(s) => s.slice_mut(&mut self.params),
            None => &mut [],
        }
    }

    /// Zeroes every parameter of the MLP branch, embeddings included.
    pub fn zero_mlp_branch(&mut self) {
        let l = self.layout.clone();
        for seg in [l.mlp_user, l.mlp_item, l.w1, l.b1, l.w2, l.b2]
            .into_iter()
            .flatten()
        {
            seg.slice_mut(&mut self.params).fill(0.0);
        }
    }

    /// Copies the GMF embeddings of `other`, which must have the same shape.
    pub fn copy_gmf_embeddings(&mut self, other: &RankingModel) -> Result<()> {
        let pairs = [
            (self.layout.gmf_user, other.layout.gmf_user),
            (self.layout.gmf_item, other.layout.gmf_item),
        ];
        for (dst, src) in pairs {
            match (dst, src) {
                (Some(d), Some(s)) if d.rows == s.rows && d.cols == s.cols => {
                    let values = s.slice(&other.params).to_vec();
                    d.slice_mut(&mut self.params).copy_from_slice(&values);
                }
                _ => return Err(Error::domain("models do not share GMF embedding shapes")),
            }
        }
        Ok(())
    }

    pub fn score(&self, u: usize, i: usize) -> f64 {
        match &self.memory {
            Memory::Popularity(counts) => counts[i],
            Memory::Knn {
                neighbors,
                user_pos,
                ..
            } => neighbors[i]
                .iter()
                .filter(|(j, _)| user_pos[u].binary_search(j).is_ok())
                .map(|(_, s)| s)
                .sum(),
            Memory::None => self.forward(&self.params, u, i, &mut Tape::default()),
        }
    }

    /// Scores of every item for user `u`.
    pub fn scores_for_user(&self, u: usize) -> Vec<f64> {
        match &self.memory {
            Memory::Popularity(counts) => counts.clone(),
            Memory::Knn {
                neighbors,
                user_pos,
                ..
            } => {
                let mut mask = vec![false; self.n_items];
                for &j in &user_pos[u] {
                    mask[j as usize] = true;
                }
                neighbors
                    .iter()
                    .map(|row| {
                        row.iter()
                            .filter(|(j, _)| mask[*j as usize])
                            .map(|(_, s)| s)
                            .sum()
                    })
                    .collect()
            }
            Memory::None => {
                let mut tape = Tape::default();
                (0..self.n_items)
                    .map(|i| self.forward(&self.params, u, i, &mut tape))
                    .collect()
            }
        }
    }

    pub(crate) fn forward(&self, p: &[f64], u: usize, i: usize, tape: &mut Tape) -> f64 {
        let l = &self.layout;
        let d = self.dim;
        match self.kind {
            ModelKind::BprMf => dot(l.gmf_user.unwrap().row(p, u), l.gmf_item.unwrap().row(p, i)),
            ModelKind::Gmf => {
                let pu = l.gmf_user.unwrap().row(p, u);
                let qi = l.gmf_item.unwrap().row(p, i);
                let h = l.out.unwrap().slice(p);
                (0..d).map(|k| h[k] * pu[k] * qi[k]).sum()
            }
            ModelKind::Mlp => {
                self.tower_forward(p, u, i, tape);
                dot(l.out.unwrap().slice(p), &tape.z2)
            }
            ModelKind::NeuMf => {
                let pu = l.gmf_user.unwrap().row(p, u);
                let qi = l.gmf_item.unwrap().row(p, i);
                let h = l.out.unwrap().slice(p);
                let g: f64 = (0..d).map(|k| h[k] * pu[k] * qi[k]).sum();
                self.tower_forward(p, u, i, tape);
                g + dot(&h[d..], &tape.z2)
            }
            ModelKind::ItemPop | ModelKind::ItemKnn => unreachable!("memory models score directly"),
        }
    }

    /// Smallest |pre-activation| over the tower's ReLU units for `(u, i)`,
    /// i.e. the distance to the nearest point where the score is not
    /// differentiable. `None` for models without a tower.
    pub fn relu_margin(&self, params: &[f64], u: usize, i: usize) -> Option<f64> {
        if !matches!(self.kind, ModelKind::Mlp | ModelKind::NeuMf) {
            return None;
        }
        let mut t = Tape::default();
        self.tower_forward(params, u, i, &mut t);
        Some(
            t.a1.iter()
                .chain(&t.a2)
                .fold(f64::INFINITY, |m, a| m.min(a.abs())),
        )
    }

    fn tower_forward(&self, p: &[f64], u: usize, i: usize, t: &mut Tape) {
        let l = &self.layout;
        let d = self.dim;
        let h2 = mlp_out_width(d);
        t.x.clear();
        t.x.extend_from_slice(l.mlp_user.unwrap().row(p, u));
        t.x.extend_from_slice(l.mlp_item.unwrap().row(p, i));
        let (w1, b1) = (l.w1.unwrap(), l.b1.unwrap().slice(p));
        t.a1.clear();
        t.a1.extend((0..d).map(|r| dot(w1.row(p, r), &t.x) + b1[r]));
        t.z1.clear();
        t.z1.extend(t.a1.iter().map(|&a| a.max(0.0)));
        let (w2, b2) = (l.w2.unwrap(), l.b2.unwrap().slice(p));
        t.a2.clear();
        t.a2.extend((0..h2).map(|r| dot(w2.row(p, r), &t.z1) + b2[r]));
        t.z2.clear();
        t.z2.extend(t.a2.iter().map(|&a| a.max(0.0)));
    }

    /// Adds `coef · ∂score(u, i)/∂θ` to `g`. `tape` must hold the forward
    /// pass of the same pair.
    pub(crate) fn backward(
        &self,
        p: &[f64],
        u: usize,
        i: usize,
        tape: &Tape,
        coef: f64,
        g: &mut [f64],
    ) {
        let l = &self.layout;
        let d = self.dim;
        match self.kind {
            ModelKind::BprMf => {
                let (pu, qi) = (l.gmf_user.unwrap(), l.gmf_item.unwrap());
                for k in 0..d {
                    g[pu.offset + u * d + k] += coef * p[qi.offset + i * d + k];
                    g[qi.offset + i * d + k] += coef * p[pu.offset + u * d + k];
                }
            }
            ModelKind::Gmf | ModelKind::NeuMf => {
                let (pu, qi, out) = (l.gmf_user.unwrap(), l.gmf_item.unwrap(), l.out.unwrap());
                for k in 0..d {
                    let (a, b, h) = (
                        p[pu.offset + u * d + k],
                        p[qi.offset + i * d + k],
                        p[out.offset + k],
                    );
                    g[out.offset + k] += coef * a * b;
                    g[pu.offset + u * d + k] += coef * h * b;
                    g[qi.offset + i * d + k] += coef * h * a;
                }
                if self.kind == ModelKind::NeuMf {
                    self.tower_backward(p, u, i, tape, coef, out.offset + d, g);
                }
            }
            ModelKind::Mlp => self.tower_backward(p, u, i, tape, coef, l.out.unwrap().offset, g),
            ModelKind::ItemPop | ModelKind::ItemKnn => {}
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn tower_backward(
        &self,
        p: &[f64],
        u: usize,
        i: usize,
        t: &Tape,
        coef: f64,
        out_offset: usize,
        g: &mut [f64],
    ) {
        let l = &self.layout;
        let d = self.dim;
        let h2 = mlp_out_width(d);
        let (w1, b1, w2, b2) = (l.w1.unwrap(), l.b1.unwrap(), l.w2.unwrap(), l.b2.unwrap());
        let mut da1 = vec![0.0; d];
        for r in 0..h2 {
            g[out_offset + r] += coef * t.z2[r];
            if t.a2[r] <= 0.0 {
                continue;
            }
            let da2 = coef * p[out_offset + r];
            g[b2.offset + r] += da2;
            let row = w2.offset + r * d;
            for c in 0..d {
                g[row + c] += da2 * t.z1[c];
                da1[c] += da2 * p[row + c];
            }
        }
        let (mu, mi) = (l.mlp_user.unwrap(), l.mlp_item.unwrap());
        for r in 0..d {
            if t.a1[r] <= 0.0 || da1[r] == 0.0 {
                continue;
            }
            let da = da1[r];
            g[b1.offset + r] += da;
            let row = w1.offset + r * 2 * d;
            for c in 0..2 * d {
                g[row + c] += da * t.x[c];
                let dx = da * p[row + c];
                if c < d {
                    g[mu.offset + u * d + c] += dx;
                } else {
                    g[mi.offset + i * d + c - d] += dx;
                }
            }
        }
    }

    pub(crate) fn user_rows(&self, u: usize) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        let d = self.dim;
        [self.layout.gmf_user, self.layout.mlp_user]
            .into_iter()
            .flatten()
            .map(move |s| s.offset + u * d..s.offset + (u + 1) * d)
    }

    pub(crate) fn item_rows(&self, i: usize) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        let d = self.dim;
        [self.layout.gmf_item, self.layout.mlp_item]
            .into_iter()
            .flatten()
            .map(move |s| s.offset + i * d..s.offset + (i + 1) * d)
    }

    pub(crate) fn dense_blocks(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        self.layout.dense().map(|s| s.range())
    }

    pub fn to_matrix_file(&self) -> MatrixFile {
        let mut f = MatrixFile::new();
        f.set_meta("kind", "ranker")
            .set_meta("model", self.kind)
            .set_meta("users", self.n_users)
            .set_meta("items", self.n_items)
            .set_meta("dim", self.dim);
        match &self.memory {
            Memory::None => {
                for (name, seg) in self.layout.named() {
                    if let Some(s) = seg {
                        f.push_matrix(name, s.to_matrix(&self.params));
                    }
                }
            }
            Memory::Popularity(counts) => {
                f.push_vector("popularity", counts);
            }
            Memory::Knn {
                neighbors,
                user_pos,
                k,
            } => {
                f.set_meta("knn_k", k);
                let rows: Vec<f64> = neighbors
                    .iter()
                    .enumerate()
                    .flat_map(|(i, row)| {
                        row.iter().flat_map(move |&(j, s)| [i as f64, j as f64, s])
                    })
                    .collect();
                f.push_matrix(
                    "knn_neighbors",
                    Matrix::from_vec(rows.len() / 3, 3, rows).expect("triples"),
                );
                let pos: Vec<f64> = user_pos
                    .iter()
                    .enumerate()
                    .flat_map(|(u, items)| items.iter().flat_map(move |&i| [u as f64, i as f64]))
                    .collect();
                f.push_matrix(
                    "user_positives",
                    Matrix::from_vec(pos.len() / 2, 2, pos).expect("pairs"),
                );
            }
        }
        f
    }

    pub fn from_matrix_file(f: &MatrixFile) -> Result<Self> {
        if f.require_meta("kind")? != "ranker" {
            return Err(Error::parse(0, "not a ranker checkpoint"));
        }
        let kind: ModelKind = f
            .require_meta("model")?
            .parse()
            .map_err(|_| Error::parse(0, "unknown model kind in checkpoint"))?;
        let n_users: usize = f.require_meta_parsed("users")?;
        let n_items: usize = f.require_meta_parsed("items")?;
        let dim: usize = f.require_meta_parsed("dim")?;
        let id = |x: f64, bound: usize| -> Result<u32> {
            if x >= 0.0 && x.fract() == 0.0 && (x as usize) < bound {
                Ok(x as u32)
            } else {
                Err(Error::parse(0, format!("id {x} out of range")))
            }
        };
        match kind {
            ModelKind::ItemPop => {
                let counts = f.require_vector("popularity")?;
                if counts.len() != n_items {
                    return Err(Error::parse(0, "popularity vector has the wrong length"));
                }
                Ok(Self::memory_model(
                    kind,
                    n_users,
                    n_items,
                    Memory::Popularity(counts),
                ))
            }
            ModelKind::ItemKnn => {
                let k: usize = f.require_meta_parsed("knn_k")?;
                let mut neighbors = vec![Vec::new(); n_items];
                let nb = f.require_matrix("knn_neighbors")?;
                for r in 0..nb.rows() {
                    let row = nb.row(r);
                    neighbors[id(row[0], n_items)? as usize].push((id(row[1], n_items)?, row[2]));
                }
                let mut user_pos = vec![Vec::new(); n_users];
                let pos = f.require_matrix("user_positives")?;
                for r in 0..pos.rows() {
                    let row = pos.row(r);
                    user_pos[id(row[0], n_users)? as usize].push(id(row[1], n_items)?);
                }
                for items in &mut user_pos {
                    items.sort_unstable();
                }
                Ok(Self::memory_model(
                    kind,
                    n_users,
                    n_items,
                    Memory::Knn {
                        neighbors,
                        user_pos,
                        k,
                    },
                ))
            }
            _ => {
                let mut m = Self::zeros(kind, n_users, n_items, dim)?;
                for (name, seg) in m.layout.named() {
                    if let Some(s) = seg {
                        let mat = f.require_matrix(name)?;
                        if mat.rows() != s.rows || mat.cols() != s.cols {
                            return Err(Error::parse(
                                0,
                                format!("matrix `{name}` has the wrong shape"),
                            ));
                        }
                        s.slice_mut(&mut m.params).copy_from_slice(mat.as_slice());
                    }
                }
                Ok(m)
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_matrix_file().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_matrix_file(&MatrixFile::load(path)?)
    }
}

/// `Σ −log σ(f(u,i) − f(u,j))` over the triplets.
pub fn loss_pairwise(model: &RankingModel, triplets: &[Triplet]) -> f64 {
    triplets
        .iter()
        .map(|t| {
            let m = model.score(t.user as usize, t.pos as usize)
                - model.score(t.user as usize, t.neg as usize);
            -log_sigmoid(m)
        })
        .sum()
}

/// Binary cross-entropy of `σ(f(u,i))` against the labels, summed.
pub fn loss_pointwise(model: &RankingModel, samples: &[Labeled]) -> f64 {
    samples
        .iter()
        .map(|s| {
            let z = model.score(s.user as usize, s.item as usize);
            if s.label {
                -log_sigmoid(z)
            } else {
                -log_sigmoid(-z)
            }
        })
        .sum()
}

#[derive(Clone, Copy, Debug)]
pub enum Candidates<'a> {
    /// Every item except the given training positives.
    All {
        exclude: &'a BTreeSet<u32>,
    },
    Items(&'a [u32]),
}

/// Sorts `(item, score)` pairs by descending score, ties by lower item id.
pub fn rank_by_score(scored: &mut [(u32, f64)]) {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
}

pub fn recommend_topn(
    model: &RankingModel,
    u: usize,
    candidates: Candidates<'_>,
    n: usize,
) -> Result<Vec<u32>> {
    let scores = model.scores_for_user(u);
    let mut scored: Vec<(u32, f64)> = match candidates {
        Candidates::All { exclude } => (0..model.n_items() as u32)
            .filter(|i| !exclude.contains(i))
            .map(|i| (i, scores[i as usize]))
            .collect(),
        Candidates::Items(items) => items.iter().map(|&i| (i, scores[i as usize])).collect(),
    };
    if n > scored.len() {
        return Err(Error::domain(format!(
            "cannot recommend {n} items from {} candidates",
            scored.len()
        )));
    }
    rank_by_score(&mut scored);
    Ok(scored.into_iter().take(n).map(|(i, _)| i).collect())
}

#[cfg(test)]
mod tests;
