//! Flat `section.key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown or repeated keys are
//! errors. Every key has a default, and [`ExperimentConfig::to_pairs`] lists
//! the fully resolved configuration in a fixed order for report headers.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::evalkit::{CandidatePolicy, DEFAULT_TOP_N};
use crate::intervention::InterventionMode;
use crate::rankers::{ModelKind, Objective, RankerHyper};
use crate::simulator::{ImpressionHyper, PosteriorHyper, SelectionHyper};
use crate::synthgen::{parse_noise, FeedbackMode, FeedbackNoise};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    /// Native three-column log.
    Native(PathBuf),
    /// MIND `behaviors.tsv`.
    Mind(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub users: usize,
    pub items: usize,
    pub dim: usize,
    pub mode: FeedbackMode,
    pub noise: FeedbackNoise,
    pub lists: usize,
    pub list_len: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            users: 600,
            items: 300,
            dim: 16,
            mode: FeedbackMode::Nonlinear,
            noise: FeedbackNoise::None,
            lists: 25,
            list_len: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InterventionConfig {
    pub mode: InterventionMode,
    pub rounds: usize,
    /// Actions per user per round.
    pub steps: usize,
    /// Noise-control level; `None` keeps every (selected, unselected) pair.
    pub k: Option<usize>,
    /// Simulated selections per list, used only without noise control.
    pub select_m: usize,
    pub list_len: usize,
    pub exploration_start: f64,
    pub policy_hidden: usize,
    pub policy_init_std: f64,
    pub policy_lr: f64,
    pub pretrain_episodes: usize,
    /// Users drawn per pre-training episode.
    pub pretrain_users: usize,
    /// Keep updating the policy from each round's episodes.
    pub update_in_rounds: bool,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
}

impl Default for InterventionConfig {
    fn default() -> Self {
        InterventionConfig {
            mode: InterventionMode::Learned,
            rounds: 3,
            steps: 1,
            k: Some(2),
            select_m: 1,
            list_len: 5,
            exploration_start: 0.5,
            policy_hidden: 32,
            policy_init_std: 0.1,
            policy_lr: 1e-3,
            pretrain_episodes: 20,
            pretrain_users: 64,
            update_in_rounds: false,
            finetune_epochs: 5,
            finetune_lr: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSpec {
    pub n: usize,
    /// `None` picks `all` for synthetic and native data and `sampled:99`
    /// for MIND.
    pub candidates: Option<CandidatePolicy>,
    pub coldness: bool,
    pub low_max: usize,
    pub high_min: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            n: DEFAULT_TOP_N,
            candidates: None,
            coldness: true,
            low_max: 5,
            high_min: 15,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub source: DataSource,
    /// Users kept from a MIND file; 0 keeps all.
    pub max_users: usize,
    pub synth: SynthSpec,
    pub impression: ImpressionHyper,
    pub selection: SelectionHyper,
    pub posterior: PosteriorHyper,
    pub intervention: InterventionConfig,
    pub target_kind: ModelKind,
    pub target: RankerHyper,
    pub eval: EvalSpec,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            source: DataSource::Synthetic,
            max_users: 0,
            synth: SynthSpec::default(),
            impression: ImpressionHyper::default(),
            selection: SelectionHyper::default(),
            posterior: PosteriorHyper::default(),
            intervention: InterventionConfig::default(),
            target_kind: ModelKind::BprMf,
            target: RankerHyper::default(),
            eval: EvalSpec::default(),
            output_dir: PathBuf::from("cpr-out"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_k(key: &str, value: &str) -> Result<Option<usize>> {
    match value {
        "none" | "off" => Ok(None),
        _ => match parse::<usize>(key, value)? {
            0 => Err(Error::Config(format!(
                "`{key}` must be at least 1, or `none`"
            ))),
            k => Ok(Some(k)),
        },
    }
}

fn noise_spec(noise: FeedbackNoise) -> String {
    match noise {
        FeedbackNoise::None => "none".into(),
        FeedbackNoise::Constant(c) => format!("constant:{c}"),
        FeedbackNoise::Gaussian { std } => format!("gaussian:{std}"),
    }
}

fn config_err(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

impl ExperimentConfig {
    /// Sets one key. Values are trimmed by the caller.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "data.source" => {
                self.source = match v {
                    "synthetic" => DataSource::Synthetic,
                    "native" => DataSource::Native(self.data_path().unwrap_or_default()),
                    "mind" => DataSource::Mind(self.data_path().unwrap_or_default()),
                    _ => {
                        return Err(Error::Config(format!(
                            "`{key}` must be synthetic, native or mind"
                        )))
                    }
                }
            }
            "data.path" => {
                let p = PathBuf::from(v);
                match &mut self.source {
                    DataSource::Synthetic => self.source = DataSource::Native(p),
                    DataSource::Native(q) | DataSource::Mind(q) => *q = p,
                }
            }
            "data.max_users" => self.max_users = parse(key, v)?,
            "synth.users" => self.synth.users = parse(key, v)?,
            "synth.items" => self.synth.items = parse(key, v)?,
            "synth.dim" => self.synth.dim = parse(key, v)?,
            "synth.mode" => self.synth.mode = v.parse().map_err(config_err)?,
            "synth.noise" => self.synth.noise = parse_noise(v)?,
            "synth.lists" => self.synth.lists = parse(key, v)?,
            "synth.list_len" => self.synth.list_len = parse(key, v)?,
            "simulator.d_R" => self.impression.dim = parse(key, v)?,
            "simulator.d_S" => self.selection.dim = parse(key, v)?,
            "simulator.lr" => {
                self.impression.learning_rate = parse(key, v)?;
                self.selection.learning_rate = self.impression.learning_rate;
            }
            "simulator.epochs" => {
                self.impression.epochs = parse(key, v)?;
                self.selection.epochs = self.impression.epochs;
            }
            "simulator.batch_size" => {
                self.impression.batch_size = parse(key, v)?;
                self.selection.batch_size = self.impression.batch_size;
            }
            "simulator.negatives" => self.impression.negatives = parse(key, v)?,
            "simulator.noise_draws" => {
                self.impression.alpha_draws = parse(key, v)?;
                self.selection.beta_draws = self.impression.alpha_draws;
            }
            "posterior.lr" => self.posterior.learning_rate = parse(key, v)?,
            "posterior.epochs" => self.posterior.epochs = parse(key, v)?,
            "posterior.mc_samples" => self.posterior.mc_samples = parse(key, v)?,
            "intervention.mode" => self.intervention.mode = v.parse().map_err(config_err)?,
            "intervention.rounds" => self.intervention.rounds = parse(key, v)?,
            "intervention.steps" => self.intervention.steps = parse(key, v)?,
            "intervention.k" => self.intervention.k = parse_k(key, v)?,
            "intervention.select_m" => self.intervention.select_m = parse(key, v)?,
            "intervention.list_len" => self.intervention.list_len = parse(key, v)?,
            "intervention.exploration_start" => {
                self.intervention.exploration_start = parse(key, v)?
            }
            "intervention.policy_hidden" => self.intervention.policy_hidden = parse(key, v)?,
            "intervention.policy_init_std" => self.intervention.policy_init_std = parse(key, v)?,
            "intervention.policy_lr" => self.intervention.policy_lr = parse(key, v)?,
            "intervention.pretrain_episodes" => {
                self.intervention.pretrain_episodes = parse(key, v)?
            }
            "intervention.pretrain_users" => self.intervention.pretrain_users = parse(key, v)?,
            "intervention.update_in_rounds" => self.intervention.update_in_rounds = parse(key, v)?,
            "intervention.finetune_epochs" => self.intervention.finetune_epochs = parse(key, v)?,
            "intervention.finetune_lr" => self.intervention.finetune_lr = parse(key, v)?,
            "target.model" => self.target_kind = v.parse().map_err(config_err)?,
            "target.objective" => {
                self.target.objective = match v {
                    "default" => None,
                    _ => Some(v.parse::<Objective>().map_err(config_err)?),
                }
            }
            "target.dim" => self.target.dim = parse(key, v)?,
            "target.lr" => self.target.learning_rate = parse(key, v)?,
            "target.epochs" => self.target.epochs = parse(key, v)?,
            "target.batch_size" => self.target.batch_size = parse(key, v)?,
            "target.l2" => self.target.l2 = parse(key, v)?,
            "target.negatives" => self.target.negatives = parse(key, v)?,
            "target.knn_k" => self.target.knn_k = parse(key, v)?,
            "eval.n" => self.eval.n = parse(key, v)?,
            "eval.candidates" => {
                self.eval.candidates = match v {
                    "auto" => None,
                    _ => Some(v.parse().map_err(config_err)?),
                }
            }
            "eval.coldness" => self.eval.coldness = parse(key, v)?,
            "eval.low_max" => self.eval.low_max = parse(key, v)?,
            "eval.high_min" => self.eval.high_min = parse(key, v)?,
            "output.dir" => self.output_dir = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    fn data_path(&self) -> Option<PathBuf> {
        match &self.source {
            DataSource::Synthetic => None,
            DataSource::Native(p) | DataSource::Mind(p) => Some(p.clone()),
        }
    }

    /// Applies `key = value` lines on top of the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", idx + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!(
                    "line {}: `{key}` set twice",
                    idx + 1
                )));
            }
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {}", idx + 1, strip_prefix(&e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact {
                path: path.to_path_buf(),
                hint: "config file not found".into(),
            },
            _ => Error::Io(e),
        })?;
        Self::from_text(&text)
    }

    /// Applies `key=value` overrides, as given on a command line.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if let DataSource::Native(p) | DataSource::Mind(p) = &self.source {
            if p.as_os_str().is_empty() {
                return bad("`data.path` is required for native and MIND data".into());
            }
        }
        let s = &self.synth;
        if s.users == 0 || s.items == 0 || s.dim == 0 || s.list_len == 0 || s.list_len > s.items {
            return bad("synthetic sizes must be positive with list_len <= items".into());
        }
        let iv = &self.intervention;
        if iv.list_len < 2 {
            return bad("`intervention.list_len` must be at least 2".into());
        }
        if let Some(k) = iv.k {
            if 2 * k > iv.list_len {
                return bad(format!(
                    "`intervention.k` = {k} needs 2k <= list_len = {}",
                    iv.list_len
                ));
            }
        }
        if iv.select_m > iv.list_len {
            return bad("`intervention.select_m` exceeds the list length".into());
        }
        if iv.policy_hidden == 0 || !(iv.policy_init_std > 0.0) || !(iv.exploration_start >= 0.0) {
            return bad("policy width and initial std must be positive".into());
        }
        if self.impression.dim == 0 || self.selection.dim == 0 || self.target.dim == 0 {
            return bad("embedding sizes must be positive".into());
        }
        if self.eval.n == 0 || self.eval.low_max > self.eval.high_min + 1 {
            return bad("`eval.n` must be positive and low_max <= high_min + 1".into());
        }
        Ok(())
    }

    pub fn candidate_policy(&self) -> CandidatePolicy {
        self.eval.candidates.unwrap_or(match self.source {
            DataSource::Mind(_) => CandidatePolicy::Sampled(99),
            _ => CandidatePolicy::All,
        })
    }

    /// The resolved configuration, one entry per key, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: &dyn Display| out.push((k.to_string(), v.to_string()));
        put("seed", &self.seed);
        let (source, path) = match &self.source {
            DataSource::Synthetic => ("synthetic", String::new()),
            DataSource::Native(p) => ("native", p.display().to_string()),
            DataSource::Mind(p) => ("mind", p.display().to_string()),
        };
        put("data.source", &source);
        if !path.is_empty() {
            put("data.path", &path);
        }
        put("data.max_users", &self.max_users);
        put("synth.users", &self.synth.users);
        put("synth.items", &self.synth.items);
        put("synth.dim", &self.synth.dim);
        put("synth.mode", &self.synth.mode);
        put("synth.noise", &noise_spec(self.synth.noise));
        put("synth.lists", &self.synth.lists);
        put("synth.list_len", &self.synth.list_len);
        put("simulator.d_R", &self.impression.dim);
        put("simulator.d_S", &self.selection.dim);
        put("simulator.lr", &self.impression.learning_rate);
        put("simulator.epochs", &self.impression.epochs);
        put("simulator.batch_size", &self.impression.batch_size);
        put("simulator.negatives", &self.impression.negatives);
        put("simulator.noise_draws", &self.impression.alpha_draws);
        put("posterior.lr", &self.posterior.learning_rate);
        put("posterior.epochs", &self.posterior.epochs);
        put("posterior.mc_samples", &self.posterior.mc_samples);
        let iv = &self.intervention;
        put("intervention.mode", &iv.mode);
        put("intervention.rounds", &iv.rounds);
        put("intervention.steps", &iv.steps);
        put(
            "intervention.k",
            &iv.k.map_or("none".to_string(), |k| k.to_string()),
        );
        put("intervention.select_m", &iv.select_m);
        put("intervention.list_len", &iv.list_len);
        put("intervention.exploration_start", &iv.exploration_start);
        put("intervention.policy_hidden", &iv.policy_hidden);
        put("intervention.policy_init_std", &iv.policy_init_std);
        put("intervention.policy_lr", &iv.policy_lr);
        put("intervention.pretrain_episodes", &iv.pretrain_episodes);
        put("intervention.pretrain_users", &iv.pretrain_users);
        put("intervention.update_in_rounds", &iv.update_in_rounds);
        put("intervention.finetune_epochs", &iv.finetune_epochs);
        put("intervention.finetune_lr", &iv.finetune_lr);
        put("target.model", &self.target_kind);
        put(
            "target.objective",
            &self
                .target
                .objective
                .map_or("default".to_string(), |o| o.to_string()),
        );
        put("target.dim", &self.target.dim);
        put("target.lr", &self.target.learning_rate);
        put("target.epochs", &self.target.epochs);
        put("target.batch_size", &self.target.batch_size);
        put("target.l2", &self.target.l2);
        put("target.negatives", &self.target.negatives);
        put("target.knn_k", &self.target.knn_k);
        put("eval.n", &self.eval.n);
        put(
            "eval.candidates",
            &self
                .eval
                .candidates
                .map_or("auto".to_string(), |c| c.to_string()),
        );
        put("eval.coldness", &self.eval.coldness);
        put("eval.low_max", &self.eval.low_max);
        put("eval.high_min", &self.eval.high_min);
        put("output.dir", &self.output_dir.display());
        out
    }

    /// Config text that parses back to `self`.
    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}
