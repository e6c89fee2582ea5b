use std::path::Path;
use std::process::{Command, Output};

use seqdream::dreamer::{DreamResult, TargetMode, Variant};
use seqdream::evaluator::EvalReport;
use seqdream::harness::cli::{EXIT_CONFIG, EXIT_IO, EXIT_MISSING_WEIGHTS, EXIT_USAGE};
use seqdream::harness::{RunDir, RunStatus};

fn seqdream(args: &[&str]) -> Output {
    seqdream_env(args, &[])
}

fn seqdream_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_seqdream"));
    cmd.args(args).env_remove("SEQDREAM_OUT_DIR").env_remove("SEQDREAM_PARALLELISM");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small synthetic dataset and a briefly trained model in `root/run`.
fn trained(root: &Path) {
    let data = root.join("data");
    ok(&seqdream(&["synth", "--seed", "7", "--out", s(&data), "--n-train", "40", "--n-test", "10", "--length", "32"]));
    ok(&seqdream(&["train", "--seed", "7", "--data", s(&data), "--out", s(&root.join("run")), "--epochs", "3"]));
}

#[test]
fn help_on_every_subcommand() {
    ok(&seqdream(&["--help"]));
    for sub in ["synth", "train", "dream", "grid", "eval", "project"] {
        let out = seqdream(&[sub, "--help"]);
        ok(&out);
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"));
    }
}

#[test]
fn usage_errors() {
    assert_eq!(seqdream(&["train", "--bogus"]).status.code(), Some(EXIT_USAGE));
    assert_eq!(seqdream(&["fly"]).status.code(), Some(EXIT_USAGE));
    // stochastic commands require --seed
    let out = seqdream(&["dream", "--class", "1"]);
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
    assert!(stderr(&out).contains("--seed"));
}

#[test]
fn missing_inputs_have_distinct_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&seqdream(&["synth", "--seed", "1", "--out", s(&data), "--n-train", "10", "--n-test", "4", "--length", "32"]));
    let run = tmp.path().join("run");

    let out = seqdream(&["dream", "--seed", "1", "--class", "1", "--data", s(&data), "--out", s(&run)]);
    assert_eq!(out.status.code(), Some(EXIT_MISSING_WEIGHTS));
    assert!(stderr(&out).contains("error[missing-weights]"));

    let out = seqdream(&["train", "--seed", "1", "--out", s(&run)]);
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    assert!(stderr(&out).contains("data.train"));

    let missing = tmp.path().join("nope.toml");
    let out = seqdream(&["train", "--seed", "1", "--config", s(&missing)]);
    assert_eq!(out.status.code(), Some(EXIT_IO));
    assert!(stderr(&out).contains("error[io]"));

    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[dream]\nsteps = 0\n").unwrap();
    let out = seqdream(&["train", "--seed", "1", "--config", s(&bad)]);
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    assert!(stderr(&out).contains("error[config]"));
}

#[test]
fn pipeline_smoke() {
    let tmp = tempfile::tempdir().unwrap();
    trained(tmp.path());
    let run = tmp.path().join("run");
    let r = s(&run);
    ok(&seqdream(&["dream", "--seed", "2", "--out", r, "--variant", "sd", "--mode", "max", "--class", "1", "--steps", "10"]));
    ok(&seqdream(&["dream", "--seed", "2", "--out", r, "--variant", "target", "--class", "0", "--steps", "10"]));
    ok(&seqdream(&["eval", "--out", r]));
    ok(&seqdream(&["project", "--out", r, "--layer", "penultimate"]));

    let dir = RunDir::create(&run).unwrap();
    let text = std::fs::read_to_string(dir.dream_path("sd-max-c1-seed2")).unwrap();
    let result = DreamResult::from_json_str(&text).unwrap();
    assert_eq!((result.variant, result.class, result.config.mode), (Variant::Sd, 1, TargetMode::Max));
    assert_eq!(result.loss_trace.len(), result.steps_used);

    let report = std::fs::read_to_string(dir.eval_path("target-center-c0-seed2.json")).unwrap();
    assert_eq!(EvalReport::from_json_str(&report).unwrap().class, 0);
    let table = std::fs::read_to_string(dir.eval_path("distribution-penultimate.tsv")).unwrap();
    // header + 40 train rows + 2 dreams
    assert_eq!(table.lines().count(), 43);
    assert!(dir.weights_path().is_file());
    assert!(dir.eval_path("train-report.json").is_file());

    let commands: Vec<String> = dir.read_manifest().unwrap().into_iter().map(|e| e.command).collect();
    assert_eq!(commands, ["train", "dream", "dream", "eval", "project"]);
}

#[test]
fn env_and_config_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    trained(tmp.path());
    let run = tmp.path().join("run");
    let cfg = tmp.path().join("exp.toml");
    std::fs::write(
        &cfg,
        "[data]\nout_dir = \"ignored\"\n\n[dream]\nclass = 1\nsteps = 4\n\n[grid]\nsteps = [3]\nlr = [0.1]\nalpha = [6.0]\nbeta = [2.0]\nsigma = [3.0]\nlambda_alpha = [1e-5]\nlambda_beta = [1e-5]\nlambda_sm = [0.1, 0.5]\n",
    )
    .unwrap();
    // the environment beats the file and the run dir remembers its data
    let env = [("SEQDREAM_OUT_DIR", s(&run)), ("SEQDREAM_PARALLELISM", "2")];
    let out = seqdream_env(&["grid", "--seed", "5", "--config", s(&cfg)], &env);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("2 runs (0 reused)"));
    assert!(!tmp.path().join("ignored").exists());
    assert!(run.join("eval").join("grid-center-c1-ranking.json").is_file());

    let again = seqdream_env(&["grid", "--seed", "5", "--config", s(&cfg)], &env);
    ok(&again);
    assert!(String::from_utf8_lossy(&again.stdout).contains("2 runs (2 reused)"));

    let dir = RunDir::create(&run).unwrap();
    let grid_runs: Vec<_> = dir
        .read_manifest()
        .unwrap()
        .into_iter()
        .filter(|e| e.command == "grid-run")
        .collect();
    assert_eq!(grid_runs.len(), 2);
    assert!(grid_runs.iter().all(|e| e.status == RunStatus::Done));

    let out = seqdream_env(&["grid", "--seed", "5", "--config", s(&cfg)], &[("SEQDREAM_OUT_DIR", s(&run)), ("SEQDREAM_PARALLELISM", "0")]);
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let root = tmp.path().join(name);
        trained(&root);
        let run = root.join("run");
        ok(&seqdream(&["dream", "--seed", "9", "--out", s(&run), "--variant", "ascent", "--class", "1", "--steps", "8"]));
        let dir = RunDir::create(&run).unwrap();
        outputs.push([
            std::fs::read(dir.weights_path()).unwrap(),
            std::fs::read(dir.dream_path("ascent-c1-seed9")).unwrap(),
            std::fs::read(dir.eval_path("train-report.json")).unwrap(),
        ]);
    }
    assert_eq!(outputs[0], outputs[1]);
}
