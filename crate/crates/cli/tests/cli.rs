use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_roughhom"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = bin();
    cmd.args(args);
    if let Some(t) = threads {
        cmd.env("ROUGHHOM_THREADS", t);
    }
    cmd.output().expect("binary runs")
}

#[test]
fn passing_target_exits_zero_and_writes_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("correction-m.json");
    let out = run(
        &["correction-m", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()],
        None,
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("correction-m.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("epsilon,mean_error,stderr,n_replicas"));
    assert_eq!(lines.next().unwrap().split(',').count(), 4);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("correction-m.json")).unwrap()).unwrap();
    assert_eq!(json["experiment"], "correction-m");
    assert_eq!(json["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn failing_target_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(configs().join("correction-m.json")).unwrap()).unwrap();
    // a non-commuting pair has a nonzero correction
    cfg["operators"]["c"]["entries"] = serde_json::json!([-1.0, 0.5, 0.0, -2.0]);
    cfg["operators"]["q"]["entries"] = serde_json::json!([1.0, 0.3, 0.3, 1.0]);
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    let out = run(&["correction-m", "--config", path.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("FAIL correction_norm"));
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{\"experiment\": \"ergodic-rate\"}").unwrap();
    assert_eq!(run(&["ergodic-rate", "--config", path.to_str().unwrap()], None).status.code(), Some(2));
    let cfg = configs().join("correction-m.json");
    assert_eq!(run(&["ergodic-rate", "--config", cfg.to_str().unwrap()], None).status.code(), Some(2));
    assert_eq!(run(&["correction-m", "--replicas", "0"], None).status.code(), Some(2));
    assert_eq!(run(&["correction-m"], Some("zero")).status.code(), Some(2));
    assert_eq!(run(&["example-config", "nope"], None).status.code(), Some(2));
}

#[test]
fn reports_are_identical_across_thread_counts() {
    let args = ["lift-convergence", "--replicas", "6", "--seed", "99"];
    let one = run(&args, Some("1"));
    let three = run(&args, Some("3"));
    assert!(one.status.code().is_some_and(|c| c <= 1));
    assert!(!one.stdout.is_empty());
    assert_eq!(one.stdout, three.stdout);
    let csv = run(&["lift-convergence", "--replicas", "2", "--format", "csv"], None);
    assert_eq!(String::from_utf8_lossy(&csv.stdout).lines().count(), 6);
}

#[test]
fn shipped_configs_parse() {
    for entry in std::fs::read_dir(configs()).unwrap() {
        let p = entry.unwrap().path();
        let cfg = roughhom::experiment::ExperimentConfig::load(&p);
        assert!(cfg.is_ok(), "{}: {:?}", p.display(), cfg.err());
    }
}
