use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cpr_core::corpus::load_native_log;
use cpr_core::rankers::RankingModel;
use cpr_core::simulator::SimParams;

const SMALL: &str = "\
seed = 7
synth.users = 40
synth.items = 30
synth.lists = 5
simulator.epochs = 2
posterior.epochs = 2
target.epochs = 2
intervention.rounds = 1
intervention.pretrain_episodes = 2
intervention.pretrain_users = 8
";

fn cpr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cpr"))
        .args(args)
        .output()
        .expect("spawn cpr")
}

fn ok(args: &[&str]) -> String {
    let out = cpr(args);
    assert!(
        out.status.success(),
        "cpr {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path) -> String {
    let p = dir.join("small.cfg");
    fs::write(&p, SMALL).unwrap();
    p.to_str().unwrap().to_string()
}

fn run_stages(cfg: &str, out: &str, extra: &[&str]) {
    for cmd in [
        "synth-gen",
        "train-sim",
        "fit-posterior",
        "train-target",
        "intervene",
        "evaluate",
    ] {
        let mut args = vec![cmd, "-c", cfg, "-o", out];
        args.extend_from_slice(extra);
        ok(&args);
    }
}

/// File contents with the output-directory provenance line dropped.
fn normalized(path: &Path) -> Vec<u8> {
    let bytes = fs::read(path).unwrap();
    match String::from_utf8(bytes.clone()) {
        Ok(text) => text
            .lines()
            .filter(|l| !l.contains("output.dir"))
            .collect::<Vec<_>>()
            .join("\n")
            .into_bytes(),
        Err(_) => bytes,
    }
}

#[test]
fn synth_gen_then_train_sim_writes_consistent_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("run");
    let out_s = out.to_str().unwrap();
    ok(&[
        "synth-gen",
        "-c",
        &cfg,
        "-o",
        out_s,
        "--mode",
        "nonlinear",
        "--seed",
        "7",
    ]);
    ok(&["train-sim", "-c", &cfg, "-o", out_s, "--seed", "7"]);
    for f in ["config.resolved", "world.mat", "data.log", "simulator.mat"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let log = load_native_log(&out.join("data.log")).unwrap();
    assert_eq!(log.records().len(), 40 * 5);
    let params = SimParams::load(&out.join("simulator.mat")).unwrap();
    assert_eq!(params.n_users(), log.n_users());
    assert_eq!(params.n_items(), log.n_items());
    assert_eq!(params.impression.dim(), 32);
}

#[test]
fn manual_stages_reproduce_the_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let a = tmp.path().join("manual");
    let b = tmp.path().join("pipeline");
    run_stages(&cfg, a.to_str().unwrap(), &[]);
    ok(&["pipeline", "-c", &cfg, "-o", b.to_str().unwrap()]);

    let mut names: Vec<_> = fs::read_dir(&b)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    let manual: Vec<_> = {
        let mut v: Vec<_> = fs::read_dir(&a)
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        v.sort();
        v
    };
    assert_eq!(names, manual);
    assert!(names.iter().any(|n| n == "counterfactual_round0.tsv"));
    for n in &names {
        assert!(
            normalized(&a.join(n)) == normalized(&b.join(n)),
            "{n:?} differs"
        );
    }
}

#[test]
fn pipeline_reports_are_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("run");
    let o = out.to_str().unwrap();
    let first = ok(&["pipeline", "-c", &cfg, "-o", o]);
    let report = fs::read(out.join("report.tsv")).unwrap();
    let second = ok(&["pipeline", "-c", &cfg, "-o", o]);
    assert_eq!(first, second);
    assert_eq!(report, fs::read(out.join("report.tsv")).unwrap());
    assert!(first.contains("# seed = 7"));
    assert!(first.contains("# intervention.k = 2"));
}

#[test]
fn evaluate_on_itempop_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("pop");
    let o = out.to_str().unwrap();
    ok(&["synth-gen", "-c", &cfg, "-o", o]);
    ok(&["train-target", "-c", &cfg, "-o", o, "--model", "itempop"]);
    let model = RankingModel::load(&out.join("target_base.mat")).unwrap();
    assert_eq!(model.kind().label(), "itempop");
    let first = ok(&[
        "evaluate",
        "-c",
        &cfg,
        "-o",
        o,
        "--set",
        "target.model=itempop",
    ]);
    let second = ok(&[
        "evaluate",
        "-c",
        &cfg,
        "-o",
        o,
        "--set",
        "target.model=itempop",
    ]);
    assert_eq!(first, second);
    assert!(first.contains("ITEMPOP"));
    assert!(!first.contains("CPR-"));
}

#[test]
fn zero_rounds_leaves_the_target_unchanged() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("r0");
    ok(&[
        "pipeline",
        "-c",
        &cfg,
        "-o",
        out.to_str().unwrap(),
        "--set",
        "intervention.rounds=0",
    ]);
    assert_eq!(
        fs::read(out.join("target_base.mat")).unwrap(),
        fs::read(out.join("target_cpr.mat")).unwrap()
    );
    assert!(!out.join("policy.mat").exists());
}

#[test]
fn random_mode_labels_the_ablation() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("rand");
    let table = ok(&[
        "pipeline",
        "-c",
        &cfg,
        "-o",
        out.to_str().unwrap(),
        "--set",
        "intervention.mode=random",
    ]);
    assert!(table.contains("CPR-BPR-r"));
    assert!(!out.join("policy.mat").exists());
}

#[test]
fn missing_upstream_artifact_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("empty");
    let o = out.to_str().unwrap();
    let r = cpr(&["train-sim", "-c", &cfg, "-o", o]);
    assert_eq!(r.status.code(), Some(2));
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(
        err.contains("data.log") && err.contains("synth-gen"),
        "{err}"
    );

    ok(&["synth-gen", "-c", &cfg, "-o", o]);
    let r = cpr(&["intervene", "-c", &cfg, "-o", o]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("simulator.mat"));
}

#[test]
fn config_errors_exit_with_one() {
    let r = cpr(&["pipeline", "--set", "no.such.key=3"]);
    assert_eq!(r.status.code(), Some(1));
    let r = cpr(&["pipeline", "--set", "intervention.k=3"]);
    assert_eq!(r.status.code(), Some(1));
    let tmp = tempfile::tempdir().unwrap();
    let r = cpr(&[
        "pipeline",
        "-c",
        tmp.path().join("absent.cfg").to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn theory_check_prints_the_bound_and_rate() {
    let text = ok(&[
        "theory-check",
        "--theorem",
        "1",
        "--eta",
        "0.75",
        "--delta",
        "0.05",
        "--trials",
        "20000",
    ]);
    assert!(text.contains("bound 6\n"), "{text}");
    let rate: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("empirical failure rate "))
        .and_then(|l| l.split_whitespace().next())
        .unwrap()
        .parse()
        .unwrap();
    // exact failure probability of a 6-vote majority at 0.75 is 694/4096
    let exact = 694.0 / 4096.0;
    let sigma = (exact * (1.0 - exact) / 20000.0f64).sqrt();
    assert!((rate - exact).abs() < 4.0 * sigma, "{rate}");

    let tsv = ok(&["theory-check", "--theorem", "2", "--tsv", "--trials", "50"]);
    let row: Vec<&str> = tsv.lines().nth(1).unwrap().split('\t').collect();
    assert_eq!(row[5], "1154");
}

#[test]
fn help_lists_every_subcommand() {
    let text = ok(&["--help"]);
    for cmd in [
        "synth-gen",
        "train-sim",
        "fit-posterior",
        "train-target",
        "intervene",
        "evaluate",
        "theory-check",
        "pipeline",
    ] {
        assert!(text.contains(cmd), "{cmd}");
    }
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["synthetic.cfg", "mind.cfg"] {
        let cfg = cpr_core::config::ExperimentConfig::load(&root.join(name)).unwrap();
        cfg.validate().unwrap();
    }
}
