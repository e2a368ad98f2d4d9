use std::fs;
use std::path::Path;
use std::process::Command;

use mspc::harness::ExperimentConfig;

fn small_config(dir: &Path) -> std::path::PathBuf {
    let mut cfg = ExperimentConfig::default();
    cfg.n_trials = 3;
    cfg.rollouts = 500;
    cfg.mc_samples = 2_000;
    cfg.reach_samples = 2_000;
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_json().unwrap()).unwrap();
    path
}

fn mspc(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_mspc"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run mspc")
}

#[test]
fn report_is_reproducible_across_runs_and_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let cfg = cfg.to_str().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let out = mspc(&["report", "--config", cfg, "--out", a.to_str().unwrap(), "--jobs", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = mspc(&["report", "--config", cfg, "--out", b.to_str().unwrap(), "--jobs", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["reach.csv", "feasibility.csv", "solves.csv", "constants.csv", "violation.csv", "summary.json"] {
        let x = fs::read(a.join(name)).unwrap_or_else(|_| panic!("missing {name}"));
        let y = fs::read(b.join(name)).unwrap();
        assert!(x == y, "{name} differs between runs");
    }
    assert!(a.join("timings.csv").exists());
    let reach = fs::read_to_string(a.join("reach.csv")).unwrap();
    assert!(reach.lines().any(|l| l.contains("sequential")));
}

#[test]
fn identify_writes_one_artifact_per_trial() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("id");
    let out = mspc(&["identify", "--out", out_dir.to_str().unwrap(), "--trials", "2", "--seed", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut names: Vec<String> = fs::read_dir(out_dir.join("trials"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names, ["trial_0000.json", "trial_0001.json"]);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("x");
    let out_dir = out_dir.to_str().unwrap();

    // bad configuration
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"horizon": 0}"#).unwrap();
    let out = mspc(&["identify", "--config", bad.to_str().unwrap(), "--out", out_dir]);
    assert_eq!(out.status.code(), Some(1));
    let out = mspc(&["control", "--method", "sampling", "--out", out_dir]);
    assert_eq!(out.status.code(), Some(1));

    // too little data for any predictor: every trial fails numerically
    let mut cfg = ExperimentConfig::default();
    cfg.n_trials = 2;
    cfg.data_length = 80;
    let short = tmp.path().join("short.json");
    fs::write(&short, cfg.to_json().unwrap()).unwrap();
    let out = mspc(&["reach", "--config", short.to_str().unwrap(), "--out", out_dir]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
