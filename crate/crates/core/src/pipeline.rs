//! The end-to-end learning procedure: fit the simulator, fit the noise
//! posteriors, train the target ranker on observed data, pre-train the
//! intervention policy, then alternate counterfactual generation and
//! target fine-tuning before evaluating.
//!
//! Every stage draws from its own stream derived from the root seed, so the
//! stages can be run one at a time (see the command-line front end) and
//! still produce the same artifacts as a full run.

use std::path::{Path, PathBuf};

use crate::config::{DataSource, ExperimentConfig};
use crate::corpus::{
    coldness_buckets, leave_one_out_split, load_mind_behaviors, load_native_log, InteractionLog,
    SplitPair,
};
use crate::error::{Error, Result};
use crate::evalkit::{coldness_report, evaluate, EvalReport};
use crate::intervention::{
    reinforce_update, run_intervention_round, write_batches_tsv, CounterfactualBatch, Episode,
    ExplorationSchedule, GaussianPolicy, InterventionMode, PolicyStep, RoundSpec,
};
use crate::mathcore::RandomStream;
use crate::rankers::{
    train_model, train_pairwise, train_pointwise, ModelKind, Objective, ObservedData, RankerHyper,
    RankingModel, TrainSource,
};
use crate::simulator::{
    fit_posterior, train_impression_model, train_selection_model, SimParams, VariationalPosterior,
};
use crate::synthgen::SyntheticWorld;

pub const CONFIG_FILE: &str = "config.resolved";
pub const WORLD_FILE: &str = "world.mat";
pub const DATA_FILE: &str = "data.log";
pub const SIMULATOR_FILE: &str = "simulator.mat";
pub const POSTERIOR_FILE: &str = "posterior.mat";
pub const TARGET_FILE: &str = "target_base.mat";
pub const POLICY_FILE: &str = "policy.mat";
pub const CPR_FILE: &str = "target_cpr.mat";
pub const REPORT_FILE: &str = "report.txt";
pub const REPORT_TSV_FILE: &str = "report.tsv";

pub fn batches_file(round: usize) -> String {
    format!("counterfactual_round{round}.tsv")
}

fn root(cfg: &ExperimentConfig) -> RandomStream {
    RandomStream::new(cfg.seed)
}

fn staged<T>(stage: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Stage { .. } => e,
        other => Error::Stage {
            stage,
            source: Box::new(other),
        },
    })
}

pub struct Dataset {
    pub log: InteractionLog,
    /// Ground truth, for synthetic data only.
    pub world: Option<SyntheticWorld>,
}

/// Generates the synthetic log or reads the configured file.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.source {
        DataSource::Synthetic => {
            let s = &cfg.synth;
            let stream = root(cfg).derive("data");
            let world = SyntheticWorld::generate(
                s.users,
                s.items,
                s.dim,
                s.noise,
                &mut stream.derive("world"),
            );
            let log = world.emit_dataset(s.mode, s.lists, s.list_len, &stream.derive("log"))?;
            Ok(Dataset {
                log,
                world: Some(world),
            })
        }
        DataSource::Native(p) => Ok(Dataset {
            log: load_native_log(p)?,
            world: None,
        }),
        DataSource::Mind(p) => {
            let cap = if cfg.max_users == 0 {
                usize::MAX
            } else {
                cfg.max_users
            };
            Ok(Dataset {
                log: load_mind_behaviors(p, cap)?,
                world: None,
            })
        }
    }
}

pub fn split_dataset(cfg: &ExperimentConfig, log: &InteractionLog) -> Result<SplitPair> {
    leave_one_out_split(log, &mut root(cfg).derive("split"))
}

/// Both structural equations, fit on the training log.
pub fn train_simulator(cfg: &ExperimentConfig, train: &InteractionLog) -> Result<SimParams> {
    let s = root(cfg).derive("simulator");
    let impression = train_impression_model(train, &cfg.impression, &mut s.derive("impression"))?;
    let selection = train_selection_model(train, &cfg.selection, &mut s.derive("selection"))?;
    Ok(SimParams {
        impression,
        selection,
    })
}

pub fn fit_posteriors(
    cfg: &ExperimentConfig,
    params: &SimParams,
    train: &InteractionLog,
) -> Result<VariationalPosterior> {
    fit_posterior(
        params,
        train,
        &cfg.posterior,
        &mut root(cfg).derive("posterior"),
    )
}

/// The target model trained on observed data only.
pub fn train_target(cfg: &ExperimentConfig, train: &InteractionLog) -> Result<RankingModel> {
    train_model(
        cfg.target_kind,
        train,
        &cfg.target,
        &mut root(cfg).derive("target"),
    )
}

fn round_spec(cfg: &ExperimentConfig, steps: usize, first_episode: u64) -> RoundSpec {
    let iv = &cfg.intervention;
    RoundSpec {
        mode: iv.mode,
        objective: objective(cfg),
        list_len: iv.list_len,
        steps_per_user: steps,
        k: iv.k,
        select_m: iv.select_m,
        exploration: ExplorationSchedule {
            start: iv.exploration_start,
            total: (iv.pretrain_episodes * iv.pretrain_users) as u64,
        },
        first_episode,
    }
}

fn objective(cfg: &ExperimentConfig) -> Objective {
    cfg.target
        .objective
        .unwrap_or(cfg.target_kind.default_objective())
}

fn steps_of(episodes: &[Episode], params: &SimParams) -> Vec<PolicyStep> {
    episodes.iter().map(|e| e.step(params)).collect()
}

/// REINFORCE against the frozen observed-data target. Each episode draws a
/// set of distinct users, intervenes once on each and takes one policy step.
/// Random-intervention runs have no policy.
pub fn pretrain_policy(
    cfg: &ExperimentConfig,
    params: &SimParams,
    posterior: &VariationalPosterior,
    target: &RankingModel,
) -> Result<Option<GaussianPolicy>> {
    let iv = &cfg.intervention;
    if iv.mode == InterventionMode::Random {
        return Ok(None);
    }
    let stream = root(cfg).derive("policy");
    let mut policy = GaussianPolicy::initialized(
        params.impression.dim(),
        iv.policy_hidden,
        iv.policy_init_std,
        &mut stream.derive("init"),
    )?;
    let n_users = params.n_users();
    let per_episode = iv.pretrain_users.min(n_users);
    for e in 0..iv.pretrain_episodes {
        let es = stream.derive_indexed("episode", e as u64);
        let mut users: Vec<u32> = es
            .derive("users")
            .sample_distinct(n_users, per_episode)
            .into_iter()
            .map(|u| u as u32)
            .collect();
        users.sort_unstable();
        let spec = round_spec(cfg, 1, (e * iv.pretrain_users) as u64);
        let (_, episodes) =
            run_intervention_round(Some(&policy), params, posterior, target, &users, &spec, &es)?;
        if episodes.is_empty() {
            continue;
        }
        let steps = steps_of(&episodes, params);
        policy = reinforce_update(&policy, &steps, iv.policy_lr)?;
        let mean = steps.iter().map(|s| s.reward).sum::<f64>() / steps.len() as f64;
        log::debug!("policy episode {e}: mean reward {mean:.5}");
    }
    if !policy.is_finite() {
        return Err(Error::Numeric("policy parameters became non-finite".into()));
    }
    Ok(Some(policy))
}

pub struct RoundsOutcome {
    pub model: RankingModel,
    pub policy: Option<GaussianPolicy>,
    /// Counterfactual batches of every round.
    pub batches: Vec<Vec<CounterfactualBatch>>,
}

/// Intervention rounds. Each round intervenes on every user, then fine-tunes
/// the target on the counterfactual samples mixed 1:1 with freshly sampled
/// observed data.
pub fn run_rounds(
    cfg: &ExperimentConfig,
    params: &SimParams,
    posterior: &VariationalPosterior,
    train: &InteractionLog,
    base: RankingModel,
    policy: Option<GaussianPolicy>,
) -> Result<RoundsOutcome> {
    let iv = &cfg.intervention;
    let mut model = base;
    let mut policy = policy;
    let mut all = Vec::new();
    if iv.rounds == 0 {
        return Ok(RoundsOutcome {
            model,
            policy,
            batches: all,
        });
    }
    if !model.kind().is_trainable() {
        return Err(Error::Config(format!(
            "{} cannot be fine-tuned; set intervention.rounds = 0",
            model.kind()
        )));
    }
    let data = ObservedData::from_log(train);
    let users: Vec<u32> = (0..train.n_users() as u32).collect();
    let hyper = RankerHyper {
        epochs: iv.finetune_epochs,
        learning_rate: iv.finetune_lr,
        ..cfg.target.clone()
    };
    let stream = root(cfg).derive("rounds");
    let pretrain_total = (iv.pretrain_episodes * iv.pretrain_users) as u64;
    let per_round = (users.len() * iv.steps) as u64;
    for r in 0..iv.rounds {
        let rs = stream.derive_indexed("round", r as u64);
        let spec = round_spec(cfg, iv.steps, pretrain_total + r as u64 * per_round);
        let (batches, episodes) = run_intervention_round(
            policy.as_ref(),
            params,
            posterior,
            &model,
            &users,
            &spec,
            &rs.derive("intervene"),
        )?;
        let mut ft = rs.derive("finetune");
        model = match objective(cfg) {
            Objective::Pairwise => {
                let triplets: Vec<_> = batches.iter().flat_map(|b| b.triplets()).collect();
                let sources = [
                    TrainSource::Triplets(&triplets),
                    TrainSource::Observed {
                        data: &data,
                        per_epoch: Some(triplets.len()),
                    },
                ];
                train_pairwise(model, &sources, &hyper, &mut ft)?
            }
            Objective::Pointwise => {
                let labeled: Vec<_> = batches.iter().flat_map(|b| b.labeled()).collect();
                let positives = labeled.iter().filter(|l| l.label).count();
                let sources = [
                    TrainSource::Labeled(&labeled),
                    TrainSource::Observed {
                        data: &data,
                        per_epoch: Some(positives),
                    },
                ];
                train_pointwise(model, &sources, &hyper, &mut ft)?
            }
        };
        if iv.update_in_rounds && !episodes.is_empty() {
            if let Some(p) = policy.as_ref() {
                policy = Some(reinforce_update(
                    p,
                    &steps_of(&episodes, params),
                    iv.policy_lr,
                )?);
            }
        }
        let samples: usize = batches.iter().map(|b| b.len()).sum();
        log::info!("round {r}: {samples} counterfactual samples");
        all.push(batches);
    }
    Ok(RoundsOutcome {
        model,
        policy,
        batches: all,
    })
}

pub fn baseline_name(kind: ModelKind) -> String {
    kind.label().to_uppercase()
}

pub fn cpr_name(kind: ModelKind, mode: InterventionMode) -> String {
    let base = match kind {
        ModelKind::BprMf => "BPR".to_string(),
        other => other.label().to_uppercase(),
    };
    match mode {
        InterventionMode::Learned => format!("CPR-{base}"),
        InterventionMode::Random => format!("CPR-{base}-r"),
    }
}

/// One report row per model, in order, with the resolved config embedded.
pub fn evaluate_models(
    cfg: &ExperimentConfig,
    split: &SplitPair,
    models: &[(String, &RankingModel)],
) -> Result<EvalReport> {
    let policy = cfg.candidate_policy();
    let stream = root(cfg).derive("eval");
    let mut report = EvalReport::new(cfg.eval.n, policy, cfg.seed);
    report.provenance = cfg
        .to_pairs()
        .into_iter()
        .filter(|(k, _)| k != "seed")
        .collect();
    let buckets = if cfg.eval.coldness {
        Some(coldness_buckets(
            &split.train,
            cfg.eval.low_max,
            cfg.eval.high_min,
        )?)
    } else {
        None
    };
    for (name, model) in models {
        let row = match &buckets {
            Some(b) => coldness_report(name, *model, split, b, cfg.eval.n, policy, &stream)?,
            None => evaluate(name, *model, split, cfg.eval.n, policy, &stream)?,
        };
        report.rows.push(row);
    }
    Ok(report)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

pub fn artifact(cfg: &ExperimentConfig, name: &str) -> PathBuf {
    cfg.output_dir.join(name)
}

/// Validates the config, creates the output directory and records the
/// resolved config in it.
pub fn prepare_output(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    write(&artifact(cfg, CONFIG_FILE), &cfg.to_text())
}

/// Writes the world (synthetic only) and the interaction log, then returns
/// the log as read back from disk so later stages see exactly what a
/// separate process would.
pub fn stage_data(cfg: &ExperimentConfig) -> Result<InteractionLog> {
    staged(
        "data",
        (|| {
            let data = load_dataset(cfg)?;
            if let Some(w) = &data.world {
                w.save(&artifact(cfg, WORLD_FILE))?;
            }
            data.log.save_native(&artifact(cfg, DATA_FILE))?;
            read_log(cfg)
        })(),
    )
}

pub fn read_log(cfg: &ExperimentConfig) -> Result<InteractionLog> {
    let log = load_native_log(&artifact(cfg, DATA_FILE))?;
    log::info!(
        "data: {} records, {} users, {} items",
        log.records().len(),
        log.n_users(),
        log.n_items()
    );
    Ok(log)
}

pub fn stage_simulator(cfg: &ExperimentConfig, split: &SplitPair) -> Result<SimParams> {
    staged(
        "simulator",
        (|| {
            let params = train_simulator(cfg, &split.train)?;
            params.save(&artifact(cfg, SIMULATOR_FILE))?;
            Ok(params)
        })(),
    )
}

pub fn stage_posterior(
    cfg: &ExperimentConfig,
    params: &SimParams,
    split: &SplitPair,
) -> Result<VariationalPosterior> {
    staged(
        "posterior",
        (|| {
            let posterior = fit_posteriors(cfg, params, &split.train)?;
            posterior.save(&artifact(cfg, POSTERIOR_FILE))?;
            Ok(posterior)
        })(),
    )
}

pub fn stage_target(cfg: &ExperimentConfig, split: &SplitPair) -> Result<RankingModel> {
    staged(
        "target",
        (|| {
            let model = train_target(cfg, &split.train)?;
            model.save(&artifact(cfg, TARGET_FILE))?;
            Ok(model)
        })(),
    )
}

/// Policy pre-training followed by the intervention rounds. Writes the
/// policy, one sample file per round and the fine-tuned target.
pub fn stage_intervene(
    cfg: &ExperimentConfig,
    params: &SimParams,
    posterior: &VariationalPosterior,
    split: &SplitPair,
    base: &RankingModel,
) -> Result<RankingModel> {
    let policy = if cfg.intervention.rounds > 0 {
        staged("policy", pretrain_policy(cfg, params, posterior, base))?
    } else {
        None
    };
    if let Some(p) = &policy {
        staged("policy", p.save(&artifact(cfg, POLICY_FILE)))?;
    }
    staged(
        "intervene",
        (|| {
            let rounds = run_rounds(cfg, params, posterior, &split.train, base.clone(), policy)?;
            for (r, batches) in rounds.batches.iter().enumerate() {
                let file = std::fs::File::create(artifact(cfg, &batches_file(r)))?;
                write_batches_tsv(batches, std::io::BufWriter::new(file))?;
            }
            rounds.model.save(&artifact(cfg, CPR_FILE))?;
            Ok(rounds.model)
        })(),
    )
}

pub fn stage_evaluate(
    cfg: &ExperimentConfig,
    split: &SplitPair,
    models: &[(String, &RankingModel)],
) -> Result<EvalReport> {
    staged(
        "evaluate",
        (|| {
            let report = evaluate_models(cfg, split, models)?;
            write(&artifact(cfg, REPORT_FILE), &report.to_table())?;
            write(&artifact(cfg, REPORT_TSV_FILE), &report.to_tsv())?;
            Ok(report)
        })(),
    )
}

pub struct PipelineOutput {
    pub report: EvalReport,
    pub baseline: RankingModel,
    pub cpr: RankingModel,
    pub dir: PathBuf,
}

/// Runs every stage, checkpointing each into `cfg.output_dir`.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineOutput> {
    prepare_output(cfg)?;
    let log = stage_data(cfg)?;
    let split = staged("split", split_dataset(cfg, &log))?;
    let params = stage_simulator(cfg, &split)?;
    let posterior = stage_posterior(cfg, &params, &split)?;
    let baseline = stage_target(cfg, &split)?;
    let cpr = stage_intervene(cfg, &params, &posterior, &split, &baseline)?;
    let models = [
        (baseline_name(cfg.target_kind), &baseline),
        (cpr_name(cfg.target_kind, cfg.intervention.mode), &cpr),
    ];
    let report = stage_evaluate(cfg, &split, &models)?;
    Ok(PipelineOutput {
        report,
        baseline,
        cpr,
        dir: cfg.output_dir.clone(),
    })
}
