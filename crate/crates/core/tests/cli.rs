use std::path::Path;

use transfqi::harness::cli::cli_main;
use transfqi::simenv::{load_transitions_csv, CsvSchema};

const SMOKE: &str = include_str!("../../../configs/smoke.json");

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["transfqi"];
    argv.extend_from_slice(args);
    cli_main(argv)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    assert_eq!(run(&["run", "--config", s(&missing), "--out", s(dir.path())]), 1);
    assert_eq!(run(&["run", "--out", s(dir.path())]), 1);
}

#[test]
fn usage_errors_and_help() {
    assert_eq!(run(&["run", "--bogus"]), 1);
    assert_eq!(run(&["frobnicate"]), 1);
    assert_eq!(run(&[]), 1);
    assert_eq!(run(&["--help"]), 0);
    assert_eq!(run(&["--threads", "0", "check"]), 1);
}

#[test]
fn invalid_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"replications": 0}"#).unwrap();
    assert_eq!(run(&["run", "--config", s(&cfg), "--out", s(dir.path())]), 1);
}

#[test]
fn check_passes() {
    assert_eq!(run(&["check"]), 0);
}

#[test]
fn run_then_report_writes_one_panel_per_sigma() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("smoke.json");
    std::fs::write(&cfg, SMOKE).unwrap();
    let out = dir.path().join("out");
    assert_eq!(run(&["oracle", "--config", s(&cfg), "--out", s(&out)]), 0);
    let cached = std::fs::read_dir(out.join("references")).unwrap().count();
    assert_eq!(cached, 3);
    assert_eq!(run(&["run", "--config", s(&cfg), "--out", s(&out), "--threads", "1"]), 0);
    assert_eq!(run(&["report", "--out", s(&out)]), 0);
    let svgs = std::fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "svg"))
        .count();
    assert_eq!(svgs, 2);
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    // header plus 2 sigma x 2 I1 x 3 methods
    assert_eq!(summary.lines().count(), 13);
}

#[test]
fn report_rejects_empty_results() {
    let dir = tempfile::tempdir().unwrap();
    let results = dir.path().join("results.csv");
    std::fs::write(
        &results,
        "sigma_c,i_source,method,replication,mean_abs_error,h_r_hat,c_sigma_hat,runtime_ms,note\n",
    )
    .unwrap();
    assert_eq!(run(&["report", "--results", s(&results), "--out", s(dir.path())]), 1);
}

#[test]
fn simulate_writes_loadable_transitions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("smoke.json");
    std::fs::write(&cfg, SMOKE).unwrap();
    let out = dir.path().join("sim");
    assert_eq!(run(&["simulate", "--config", s(&cfg), "--out", s(&out), "--seed", "5"]), 0);
    // 3 targets + 3 reps x 2 sigma x 2 sizes
    assert_eq!(std::fs::read_dir(&out).unwrap().count(), 15);
    let schema = CsvSchema {
        state_dim: 3,
        n_actions: 2,
    };
    let t = load_transitions_csv(&out.join("target_rep0.csv"), schema).unwrap();
    assert_eq!((t.task_id, t.n_trajectories(), t.n_samples()), (0, 20, 100));
    let src = load_transitions_csv(&out.join("source_sigma0.25_i40_rep2_k0.csv"), schema).unwrap();
    assert_eq!((src.task_id, src.n_trajectories()), (1, 40));
}
