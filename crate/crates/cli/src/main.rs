use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cpr_core::config::ExperimentConfig;
use cpr_core::corpus::SplitPair;
use cpr_core::mathcore::RandomStream;
use cpr_core::pipeline::{self as pl, artifact};
use cpr_core::rankers::RankingModel;
use cpr_core::simulator::{SimParams, VariationalPosterior};
use cpr_core::theorylab;
use cpr_core::{Error, Result};

/// Counterfactual data augmentation for recommendation: each stage of the
/// learning procedure as a subcommand, plus the full pipeline.
///
/// Exit codes: 0 success, 1 config error, 2 data error, 3 numeric failure.
#[derive(Parser)]
#[command(name = "cpr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic log (or ingest the configured data file) into data.log.
    SynthGen {
        #[command(flatten)]
        common: Common,
        /// Feedback mode, shorthand for `synth.mode`.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Fit the impression and selection models; writes simulator.mat.
    TrainSim(Common),
    /// Fit the noise posteriors; needs simulator.mat, writes posterior.mat.
    FitPosterior(Common),
    /// Train the target ranker on observed data; writes target_base.mat.
    TrainTarget {
        #[command(flatten)]
        common: Common,
        /// Target model kind, shorthand for `target.model`.
        #[arg(long)]
        model: Option<String>,
    },
    /// Pre-train the policy and run the intervention rounds; needs the
    /// simulator, posterior and target checkpoints.
    Intervene(Common),
    /// Evaluate target_base.mat (and target_cpr.mat when present); writes report.txt and report.tsv.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Evaluate only target_base.mat.
        #[arg(long)]
        base_only: bool,
    },
    /// Check a sample-complexity bound by simulation.
    TheoryCheck(TheoryArgs),
    /// Run every stage in order.
    Pipeline(Common),
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Root seed, shorthand for `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Artifact directory, shorthand for `output.dir`.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Log progress to stderr.
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Args)]
struct TheoryArgs {
    /// 1: majority voting over noisy copies; 2: ERM on noisy pairs.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    theorem: u8,
    /// Per-vote correctness probability (theorem 1).
    #[arg(long, default_value_t = 0.75)]
    eta: f64,
    /// Failure probability; defaults to 0.05 for theorem 1 and 0.1 for theorem 2.
    #[arg(long)]
    delta: Option<f64>,
    /// Accuracy tolerance (theorem 2).
    #[arg(long, default_value_t = 0.2)]
    epsilon: f64,
    /// Label flip probability (theorem 2).
    #[arg(long, default_value_t = 0.25)]
    zeta: f64,
    /// Hypothesis count |F| (theorem 2).
    #[arg(long, default_value_t = 16)]
    hypotheses: u64,
    /// Monte-Carlo trials; defaults to 100000 for theorem 1 and 1000 for theorem 2.
    #[arg(long)]
    trials: Option<u64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print one TSV row instead of text.
    #[arg(long)]
    tsv: bool,
}

fn resolve(common: &Common, extra: &[(&str, Option<&str>)]) -> Result<ExperimentConfig> {
    if common.verbose {
        let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
            .try_init();
    } else {
        let _ = env_logger::try_init();
    }
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let mut sets: Vec<String> = Vec::new();
    if let Some(s) = common.seed {
        sets.push(format!("seed={s}"));
    }
    if let Some(o) = &common.out {
        sets.push(format!("output.dir={}", o.display()));
    }
    for (key, value) in extra {
        if let Some(v) = value {
            sets.push(format!("{key}={v}"));
        }
    }
    sets.extend(common.overrides.iter().cloned());
    cfg.apply_overrides(&sets)?;
    Ok(cfg)
}

/// Points a missing checkpoint at the subcommand that writes it.
fn upstream<T>(r: Result<T>, producer: &str) -> Result<T> {
    r.map_err(|e| match e {
        Error::MissingArtifact { path, .. } => Error::MissingArtifact {
            path,
            hint: format!("run `cpr {producer}` first"),
        },
        other => other,
    })
}

fn load_split(cfg: &ExperimentConfig) -> Result<SplitPair> {
    let log = upstream(pl::read_log(cfg), "synth-gen")?;
    pl::split_dataset(cfg, &log)
}

fn load_sim(cfg: &ExperimentConfig) -> Result<SimParams> {
    upstream(
        SimParams::load(&artifact(cfg, pl::SIMULATOR_FILE)),
        "train-sim",
    )
}

fn load_posterior(cfg: &ExperimentConfig) -> Result<VariationalPosterior> {
    upstream(
        VariationalPosterior::load(&artifact(cfg, pl::POSTERIOR_FILE)),
        "fit-posterior",
    )
}

fn load_target(cfg: &ExperimentConfig) -> Result<RankingModel> {
    upstream(
        RankingModel::load(&artifact(cfg, pl::TARGET_FILE)),
        "train-target",
    )
}

fn done(path: &Path) {
    println!("wrote {}", path.display());
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthGen { common, mode } => {
            let cfg = resolve(&common, &[("synth.mode", mode.as_deref())])?;
            pl::prepare_output(&cfg)?;
            let log = pl::stage_data(&cfg)?;
            println!(
                "{} records, {} users, {} items",
                log.records().len(),
                log.n_users(),
                log.n_items()
            );
            done(&artifact(&cfg, pl::DATA_FILE));
        }
        Command::TrainSim(common) => {
            let cfg = resolve(&common, &[])?;
            let split = load_split(&cfg)?;
            let params = pl::stage_simulator(&cfg, &split)?;
            println!(
                "impression dim {}, selection dim {}, {} users, {} items",
                params.impression.dim(),
                params.selection.dim(),
                params.n_users(),
                params.n_items()
            );
            done(&artifact(&cfg, pl::SIMULATOR_FILE));
        }
        Command::FitPosterior(common) => {
            let cfg = resolve(&common, &[])?;
            let split = load_split(&cfg)?;
            let params = load_sim(&cfg)?;
            pl::stage_posterior(&cfg, &params, &split)?;
            done(&artifact(&cfg, pl::POSTERIOR_FILE));
        }
        Command::TrainTarget { common, model } => {
            let cfg = resolve(&common, &[("target.model", model.as_deref())])?;
            let split = load_split(&cfg)?;
            pl::stage_target(&cfg, &split)?;
            done(&artifact(&cfg, pl::TARGET_FILE));
        }
        Command::Intervene(common) => {
            let cfg = resolve(&common, &[])?;
            let split = load_split(&cfg)?;
            let params = load_sim(&cfg)?;
            let posterior = load_posterior(&cfg)?;
            let base = load_target(&cfg)?;
            pl::stage_intervene(&cfg, &params, &posterior, &split, &base)?;
            done(&artifact(&cfg, pl::CPR_FILE));
        }
        Command::Evaluate { common, base_only } => {
            let cfg = resolve(&common, &[])?;
            let split = load_split(&cfg)?;
            let base = load_target(&cfg)?;
            let cpr_path = artifact(&cfg, pl::CPR_FILE);
            let cpr = if !base_only && cpr_path.exists() {
                Some(RankingModel::load(&cpr_path)?)
            } else {
                None
            };
            let mut models = vec![(pl::baseline_name(base.kind()), &base)];
            if let Some(m) = &cpr {
                models.push((pl::cpr_name(m.kind(), cfg.intervention.mode), m));
            }
            let report = pl::stage_evaluate(&cfg, &split, &models)?;
            print!("{}", report.to_table());
        }
        Command::TheoryCheck(args) => theory_check(&args)?,
        Command::Pipeline(common) => {
            let cfg = resolve(&common, &[])?;
            let out = pl::run_pipeline(&cfg)?;
            print!("{}", out.report.to_table());
        }
    }
    Ok(())
}

fn theory_check(a: &TheoryArgs) -> Result<()> {
    let stream = RandomStream::new(a.seed);
    if a.theorem == 1 {
        let delta = a.delta.unwrap_or(0.05);
        let trials = a.trials.unwrap_or(100_000);
        let n = theorylab::bound_theorem1(a.eta, delta)?;
        let empirical = theorylab::simulate_voting(a.eta, n, trials, &mut stream.derive("voting"))?;
        let exact = theorylab::voting_failure_exact(a.eta, n);
        let ok = empirical <= delta + 0.01;
        if a.tsv {
            println!("theorem\teta\tdelta\tbound\ttrials\tempirical\texact\twithin");
            println!(
                "1\t{}\t{}\t{n}\t{trials}\t{empirical:.6}\t{exact:.6}\t{ok}",
                a.eta, delta
            );
        } else {
            println!("theorem 1: eta {} delta {}", a.eta, delta);
            println!("bound {n}");
            println!(
                "empirical failure rate {empirical:.6} over {trials} trials (exact {exact:.6})"
            );
            println!("within delta + 0.01: {}", if ok { "yes" } else { "no" });
        }
    } else {
        let delta = a.delta.unwrap_or(0.1);
        let trials = a.trials.unwrap_or(1_000);
        let out = theorylab::simulate_noisy_erm(
            a.zeta,
            a.epsilon,
            delta,
            a.hypotheses,
            trials,
            5_000_000,
            &stream.derive("erm"),
        )?;
        let ok = out.failure_rate <= delta + 0.02;
        if a.tsv {
            println!("theorem\thypotheses\tzeta\tepsilon\tdelta\tbound\ttrials\tempirical\twithin");
            println!(
                "2\t{}\t{}\t{}\t{}\t{}\t{trials}\t{:.6}\t{ok}",
                a.hypotheses, a.zeta, a.epsilon, delta, out.n, out.failure_rate
            );
        } else {
            println!(
                "theorem 2: |F| {} zeta {} epsilon {} delta {}",
                a.hypotheses, a.zeta, a.epsilon, delta
            );
            println!("bound {}", out.n);
            println!(
                "empirical failure rate {:.6} over {trials} trials",
                out.failure_rate
            );
            println!("within delta + 0.02: {}", if ok { "yes" } else { "no" });
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
