//! Shared fixtures for the kernel benchmarks under `benches/`.

use cpr_core::config::ExperimentConfig;
use cpr_core::corpus::SplitPair;
use cpr_core::pipeline::{
    fit_posteriors, load_dataset, split_dataset, train_simulator, train_target,
};
use cpr_core::rankers::RankingModel;
use cpr_core::simulator::{SimParams, VariationalPosterior};

/// A scaled-down synthetic setup with short training schedules.
pub fn small_config(users: usize, items: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    let sets = [
        format!("synth.users={users}"),
        format!("synth.items={items}"),
        "simulator.epochs=1".into(),
        "posterior.epochs=1".into(),
        "target.epochs=1".into(),
        "intervention.pretrain_episodes=1".into(),
        "intervention.pretrain_users=16".into(),
        "intervention.rounds=1".into(),
    ];
    cfg.apply_overrides(&sets).expect("bench config is valid");
    cfg
}

pub struct Fixture {
    pub cfg: ExperimentConfig,
    pub split: SplitPair,
    pub params: SimParams,
    pub posterior: VariationalPosterior,
    pub target: RankingModel,
}

pub fn fixture(users: usize, items: usize) -> Fixture {
    let cfg = small_config(users, items);
    let log = load_dataset(&cfg).expect("synthetic data").log;
    let split = split_dataset(&cfg, &log).expect("split");
    let params = train_simulator(&cfg, &split.train).expect("simulator");
    let posterior = fit_posteriors(&cfg, &params, &split.train).expect("posterior");
    let target = train_target(&cfg, &split.train).expect("target");
    Fixture {
        cfg,
        split,
        params,
        posterior,
        target,
    }
}
