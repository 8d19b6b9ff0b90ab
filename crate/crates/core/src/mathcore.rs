//! Deterministic numerics shared by every learning module: seeded random
//! streams, stable softmax / sigmoid helpers, Gaussian sampling, a small
//! dense matrix type, Adam, and a central-difference gradient checker.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

const SPLITMIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(SPLITMIX_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A seeded, single-owner stream of random draws.
///
/// Backed by ChaCha8, which is counter based and produces the same sequence
/// on every platform. Sub-streams are derived from a label so that parallel
/// or staged consumers never share state.
#[derive(Clone, Debug)]
pub struct RandomStream {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RandomStream {
    pub fn new(seed: u64) -> Self {
        RandomStream {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream keyed by `label`. Does not advance `self`.
    pub fn derive(&self, label: &str) -> RandomStream {
        RandomStream::new(splitmix64(self.seed ^ splitmix64(fnv1a(label.as_bytes()))))
    }

    /// Independent stream keyed by `label` and an index (user id, trial, ...).
    pub fn derive_indexed(&self, label: &str, index: u64) -> RandomStream {
        let base = splitmix64(self.seed ^ splitmix64(fnv1a(label.as_bytes())));
        RandomStream::new(splitmix64(base ^ splitmix64(index.wrapping_add(1))))
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn standard_normal_vec(&mut self, len: usize) -> Vec<f64> {
        (0..len).map(|_| self.standard_normal()).collect()
    }

    /// `amount` distinct indices from `0..n`, uniformly without replacement.
    pub fn sample_distinct(&mut self, n: usize, amount: usize) -> Vec<usize> {
        index::sample(&mut self.rng, n, amount).into_vec()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.rng);
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)` without overflow for large |x|.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Max-shifted softmax.
pub fn softmax(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::domain("softmax of an empty vector"));
    }
    if scores.iter().any(|x| x.is_nan()) {
        return Err(Error::domain("softmax input contains NaN"));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::domain("softmax input has no finite maximum"));
    }
    let mut out: Vec<f64> = scores.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    Ok(out)
}

/// Draws `mean + std ⊙ ε` with ε ~ N(0, I).
pub fn sample_gaussian(stream: &mut RandomStream, mean: &[f64], std: &[f64]) -> Result<Vec<f64>> {
    if mean.len() != std.len() {
        return Err(Error::domain(format!(
            "mean has length {} but std has length {}",
            mean.len(),
            std.len()
        )));
    }
    if let Some(s) = std.iter().find(|s| !(**s >= 0.0)) {
        return Err(Error::domain(format!("negative standard deviation {s}")));
    }
    Ok(mean
        .iter()
        .zip(std)
        .map(|(&m, &s)| m + s * stream.standard_normal())
        .collect())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Row-major dense matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::domain(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// I.i.d. N(0, std²) entries.
    pub fn random_normal(rows: usize, cols: usize, std: f64, stream: &mut RandomStream) -> Self {
        let data = (0..rows * cols)
            .map(|_| std * stream.standard_normal())
            .collect();
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `out = self · x` for a `cols`-vector `x`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }
}

/// A `rows × cols` block inside a flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Segment {
    /// Lays out consecutive blocks, returning them and the total length.
    pub fn layout<const N: usize>(shapes: [(usize, usize); N]) -> ([Segment; N], usize) {
        let mut offset = 0;
        let segments = shapes.map(|(rows, cols)| {
            let s = Segment { offset, rows, cols };
            offset += rows * cols;
            s
        });
        (segments, offset)
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn end(&self) -> usize {
        self.offset + self.len()
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.end()
    }

    pub fn row<'a>(&self, data: &'a [f64], i: usize) -> &'a [f64] {
        let start = self.offset + i * self.cols;
        &data[start..start + self.cols]
    }

    pub fn row_mut<'a>(&self, data: &'a mut [f64], i: usize) -> &'a mut [f64] {
        let start = self.offset + i * self.cols;
        &mut data[start..start + self.cols]
    }

    pub fn slice<'a>(&self, data: &'a [f64]) -> &'a [f64] {
        &data[self.range()]
    }

    pub fn slice_mut<'a>(&self, data: &'a mut [f64]) -> &'a mut [f64] {
        &mut data[self.range()]
    }

    pub fn to_matrix(&self, data: &[f64]) -> Matrix {
        Matrix::from_vec(self.rows, self.cols, self.slice(data).to_vec()).expect("segment shape")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// Moment estimates for one parameter tensor.
///
/// Coordinates whose gradient is exactly zero are skipped (moments and value
/// left untouched), so rows of an embedding table that a mini-batch never
/// touched do not drift.
#[derive(Clone, Debug)]
pub struct AdamState {
    config: AdamConfig,
    first: Vec<f64>,
    second: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        AdamState {
            config,
            first: vec![0.0; len],
            second: vec![0.0; len],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.first.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first.is_empty()
    }

    /// Applies one bias-corrected descent step.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::domain(format!(
                "adam state holds {} moments but got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            if g == 0.0 {
                continue;
            }
            let m = beta1 * self.first[i] + (1.0 - beta1) * g;
            let v = beta2 * self.second[i] + (1.0 - beta2) * g * g;
            self.first[i] = m;
            self.second[i] = v;
            let m_hat = m / bias1;
            let v_hat = v / bias2;
            params[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
        Ok(())
    }
}

/// Functional form of [`AdamState::step`].
pub fn adam_step(
    mut state: AdamState,
    mut params: Vec<f64>,
    grads: &[f64],
) -> Result<(Vec<f64>, AdamState)> {
    state.step(&mut params, grads)?;
    Ok((params, state))
}

pub const DEFAULT_FD_STEP: f64 = 1e-4;

/// Largest coordinate-wise relative error between `analytic_grad` and a
/// central-difference estimate of the gradient of `loss` at `params`.
pub fn finite_diff_check<F>(
    mut loss: F,
    params: &[f64],
    analytic_grad: &[f64],
    h: f64,
) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::domain(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    if params.len() != analytic_grad.len() {
        return Err(Error::domain("parameter and gradient lengths differ"));
    }
    let mut probe = params.to_vec();
    let mut worst = 0.0_f64;
    for i in 0..params.len() {
        probe[i] = params[i] + h;
        let up = loss(&probe);
        probe[i] = params[i] - h;
        let down = loss(&probe);
        probe[i] = params[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!(
                "loss is not finite around coordinate {i}"
            )));
        }
        let numeric = (up - down) / (2.0 * h);
        let err = (numeric - analytic_grad[i]).abs() / analytic_grad[i].abs().max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
