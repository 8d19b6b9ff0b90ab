//! Abduction: diagonal-Gaussian variational posteriors over the exogenous
//! noise, fit by maximizing a reparameterized ELBO.

use std::f64::consts::{E, PI};
use std::path::Path;

use crate::corpus::InteractionLog;
use crate::error::{Error, Result};
use crate::matfile::MatrixFile;
use crate::mathcore::{log_sum_exp, sample_gaussian, softmax, AdamConfig, AdamState, RandomStream};

use super::{ImpressionModel, SelectionModel, SimParams};

/// Lower bound on every fitted standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl DiagGaussian {
    pub fn standard(len: usize) -> Self {
        DiagGaussian {
            mean: vec![0.0; len],
            std: vec![1.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn sample(&self, stream: &mut RandomStream) -> Result<Vec<f64>> {
        sample_gaussian(stream, &self.mean, &self.std)
    }
}

fn std_from_rho(rho: f64) -> f64 {
    SIGMA_FLOOR + rho.exp()
}

fn rho_from_std(std: f64) -> f64 {
    (std - SIGMA_FLOOR).max(1e-300).ln()
}

/// Log-likelihood of the observed log as a function of one exogenous
/// vector, with its gradient. Constant terms may be dropped.
pub trait Evidence {
    fn dim(&self) -> usize;

    /// Whether any observation constrains the variable at all.
    fn is_informative(&self) -> bool;

    fn log_likelihood(&self, x: &[f64], grad: Option<&mut [f64]>) -> f64;
}

/// Evidence about per-slot selection noise: each record with selections
/// contributes its within-list softmax log-likelihood.
#[derive(Clone, Debug)]
pub struct BetaEvidence {
    weights: Vec<f64>,
    /// `(X_uᵀY_{r_t} for every slot t, selected slots)`
    records: Vec<(Vec<f64>, Vec<usize>)>,
}

impl BetaEvidence {
    pub fn new(model: &SelectionModel, log: &InteractionLog) -> Self {
        let weights = (0..model.slots()).map(|t| model.weight(t)).collect();
        let records = log
            .records()
            .iter()
            .filter(|r| r.has_selection())
            .map(|r| {
                let base = r
                    .items
                    .iter()
                    .map(|&j| model.affinity(r.user as usize, j as usize))
                    .collect();
                (base, r.selected_slots().collect())
            })
            .collect();
        BetaEvidence { weights, records }
    }
}

impl Evidence for BetaEvidence {
    fn dim(&self) -> usize {
        self.weights.len()
    }

    fn is_informative(&self) -> bool {
        !self.records.is_empty()
    }

    fn log_likelihood(&self, beta: &[f64], mut grad: Option<&mut [f64]>) -> f64 {
        let mut total = 0.0;
        let mut logits = Vec::new();
        for (base, selected) in &self.records {
            logits.clear();
            logits.extend(
                base.iter()
                    .enumerate()
                    .map(|(t, b)| b + self.weights[t] * beta[t]),
            );
            let lse = log_sum_exp(&logits);
            for &t in selected {
                total += logits[t] - lse;
            }
            if let Some(g) = grad.as_deref_mut() {
                let n_sel = selected.len() as f64;
                for (t, l) in logits.iter().enumerate() {
                    g[t] -= n_sel * (l - lse).exp() * self.weights[t];
                }
                for &t in selected {
                    g[t] += self.weights[t];
                }
            }
        }
        total
    }
}

/// Evidence about per-item impression noise under the full factorized
/// softmax: every shown slot is a draw over all items.
#[derive(Clone, Debug)]
pub struct AlphaEvidence {
    weights: Vec<f64>,
    /// How often each item was shown.
    shown: Vec<f64>,
    /// `(slots shown to u, P_uᵀQ_j for every item j)`
    users: Vec<(f64, Vec<f64>)>,
}

impl AlphaEvidence {
    pub fn new(model: &ImpressionModel, log: &InteractionLog) -> Self {
        let n_items = model.n_items();
        let weights = (0..n_items).map(|j| model.weight(j)).collect();
        let mut shown = vec![0.0; n_items];
        let mut slots = vec![0.0; model.n_users()];
        for r in log.records() {
            slots[r.user as usize] += r.len() as f64;
            for &j in &r.items {
                shown[j as usize] += 1.0;
            }
        }
        let users = slots
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0.0)
            .map(|(u, &c)| {
                let pu = model.user_embedding(u);
                let base = (0..n_items)
                    .map(|j| crate::mathcore::dot(pu, model.item_embedding(j)))
                    .collect();
                (c, base)
            })
            .collect();
        AlphaEvidence {
            weights,
            shown,
            users,
        }
    }
}

impl Evidence for AlphaEvidence {
    fn dim(&self) -> usize {
        self.weights.len()
    }

    fn is_informative(&self) -> bool {
        !self.users.is_empty()
    }

    fn log_likelihood(&self, alpha: &[f64], mut grad: Option<&mut [f64]>) -> f64 {
        let mut total: f64 = self
            .shown
            .iter()
            .zip(&self.weights)
            .zip(alpha)
            .map(|((n, w), a)| n * w * a)
            .sum();
        if let Some(g) = grad.as_deref_mut() {
            for j in 0..g.len() {
                g[j] += self.shown[j] * self.weights[j];
            }
        }
        let mut logits = vec![0.0; alpha.len()];
        for (count, base) in &self.users {
            for j in 0..logits.len() {
                logits[j] = base[j] + self.weights[j] * alpha[j];
            }
            total -= count * log_sum_exp(&logits);
            if let Some(g) = grad.as_deref_mut() {
                let p = softmax(&logits).expect("finite impression logits");
                for j in 0..g.len() {
                    g[j] -= count * p[j] * self.weights[j];
                }
            }
        }
        total
    }
}

/// Reparameterized ELBO estimate `E_q[log p(x, O)] + H(q)` for
/// `q = N(mean, diag(σ²))` with `σ = floor + exp(rho)`, using the given
/// standard-normal draws for the likelihood term. The prior and entropy
/// terms are exact. Gradients are with respect to `mean` and `rho`.
pub fn elbo_estimate<E: Evidence + ?Sized>(
    evidence: &E,
    mean: &[f64],
    rho: &[f64],
    eps: &[Vec<f64>],
    grads: Option<(&mut [f64], &mut [f64])>,
) -> f64 {
    let n = mean.len();
    let std: Vec<f64> = rho.iter().map(|&r| std_from_rho(r)).collect();
    let mut value = 0.0;
    for i in 0..n {
        let (m, s) = (mean[i], std[i]);
        value += -0.5 * (2.0 * PI).ln() - 0.5 * (m * m + s * s);
        value += 0.5 * (2.0 * PI * E).ln() + s.ln();
    }
    let scale = 1.0 / eps.len().max(1) as f64;
    let mut point = vec![0.0; n];
    let mut point_grad = vec![0.0; n];
    let mut grad_mean = vec![0.0; n];
    let mut grad_std = vec![0.0; n];
    for e in eps {
        for i in 0..n {
            point[i] = mean[i] + std[i] * e[i];
        }
        point_grad.fill(0.0);
        value += scale * evidence.log_likelihood(&point, Some(&mut point_grad));
        for i in 0..n {
            grad_mean[i] += scale * point_grad[i];
            grad_std[i] += scale * point_grad[i] * e[i];
        }
    }
    if let Some((gm, gr)) = grads {
        for i in 0..n {
            gm[i] = grad_mean[i] - mean[i];
            gr[i] = (grad_std[i] - std[i] + 1.0 / std[i]) * (std[i] - SIGMA_FLOOR);
        }
    }
    value
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorHyper {
    pub learning_rate: f64,
    pub epochs: usize,
    pub mc_samples: usize,
}

impl Default for PosteriorHyper {
    fn default() -> Self {
        PosteriorHyper {
            learning_rate: 0.05,
            epochs: 200,
            mc_samples: 8,
        }
    }
}

/// Maximizes the ELBO for one exogenous vector, starting from the prior.
pub fn fit_diag_gaussian<E: Evidence + ?Sized>(
    evidence: &E,
    hyper: &PosteriorHyper,
    stream: &mut RandomStream,
) -> Result<DiagGaussian> {
    let n = evidence.dim();
    if !evidence.is_informative() {
        return Ok(DiagGaussian::standard(n));
    }
    let mut params = vec![0.0; 2 * n];
    params[n..].fill(rho_from_std(1.0));
    let mut adam = AdamState::new(2 * n, AdamConfig::with_lr(hyper.learning_rate));
    let mut grad = vec![0.0; 2 * n];
    for epoch in 0..hyper.epochs {
        let eps: Vec<Vec<f64>> = (0..hyper.mc_samples.max(1))
            .map(|_| stream.standard_normal_vec(n))
            .collect();
        let (mean, rho) = params.split_at(n);
        let (gm, gr) = grad.split_at_mut(n);
        let value = elbo_estimate(evidence, mean, rho, &eps, Some((gm, gr)));
        if !value.is_finite() {
            return Err(Error::Training {
                epoch,
                message: "ELBO is not finite".into(),
            });
        }
        // ascend
        grad.iter_mut().for_each(|g| *g = -*g);
        adam.step(&mut params, &grad)?;
    }
    let (mean, rho) = params.split_at(n);
    let std: Vec<f64> = rho.iter().map(|&r| std_from_rho(r)).collect();
    let collapsed = std.iter().filter(|&&s| s < 2.0 * SIGMA_FLOOR).count();
    if collapsed > 0 {
        log::warn!("{collapsed} posterior standard deviations reached the floor {SIGMA_FLOOR}");
    }
    Ok(DiagGaussian {
        mean: mean.to_vec(),
        std,
    })
}

/// Approximate posteriors `q(α)` and `q(β)` given the observed log.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalPosterior {
    pub alpha: DiagGaussian,
    pub beta: DiagGaussian,
}

impl VariationalPosterior {
    pub fn prior(n_items: usize, slots: usize) -> Self {
        VariationalPosterior {
            alpha: DiagGaussian::standard(n_items),
            beta: DiagGaussian::standard(slots),
        }
    }

    pub fn to_matrix_file(&self) -> MatrixFile {
        let mut f = MatrixFile::new();
        f.set_meta("kind", "posterior")
            .set_meta("items", self.alpha.len())
            .set_meta("K", self.beta.len());
        f.push_vector("alpha_mean", &self.alpha.mean)
            .push_vector("alpha_std", &self.alpha.std)
            .push_vector("beta_mean", &self.beta.mean)
            .push_vector("beta_std", &self.beta.std);
        f
    }

    pub fn from_matrix_file(f: &MatrixFile) -> Result<Self> {
        if f.require_meta("kind")? != "posterior" {
            return Err(Error::parse(0, "matrix file is not a posterior checkpoint"));
        }
        let read = |m: &str, s: &str| -> Result<DiagGaussian> {
            let mean = f.require_vector(m)?;
            let std = f.require_vector(s)?;
            if mean.len() != std.len() || std.iter().any(|&x| !(x >= 0.0)) {
                return Err(Error::parse(
                    0,
                    format!("posterior `{m}` / `{s}` malformed"),
                ));
            }
            Ok(DiagGaussian { mean, std })
        };
        Ok(VariationalPosterior {
            alpha: read("alpha_mean", "alpha_std")?,
            beta: read("beta_mean", "beta_std")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_matrix_file().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_matrix_file(&MatrixFile::load(path)?)
    }
}

/// Fits both posteriors against frozen simulator parameters.
pub fn fit_posterior(
    params: &SimParams,
    log: &InteractionLog,
    hyper: &PosteriorHyper,
    stream: &mut RandomStream,
) -> Result<VariationalPosterior> {
    let alpha = fit_diag_gaussian(
        &AlphaEvidence::new(&params.impression, log),
        hyper,
        &mut stream.derive("alpha"),
    )?;
    let beta = fit_diag_gaussian(
        &BetaEvidence::new(&params.selection, log),
        hyper,
        &mut stream.derive("beta"),
    )?;
    Ok(VariationalPosterior { alpha, beta })
}
