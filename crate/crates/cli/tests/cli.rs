use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn eagr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eagr")).args(args).output().expect("spawn eagr")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes a short bar stream and returns its path.
fn stream(dir: &TempDir, n: usize) -> PathBuf {
    let p = dir.path().join("bar.evb");
    let o = eagr(&["gen-synthetic", "--pattern", "bar", "--seed", "1", "--max-events", &n.to_string(), "--out", path_str(&p)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    p
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn verify_equivalence_passes_on_random_small_weights() {
    let dir = TempDir::new().unwrap();
    let s = stream(&dir, 500);
    let out = dir.path().join("verify.json");
    let o = eagr(&["verify-equivalence", "--config", "small", "--seed", "7", "--in", path_str(&s), "--warmup", "100", "--every", "50", "--out", path_str(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(&out);
    assert_eq!(v["equivalent"], Value::Bool(true));
    assert_eq!(v["insertions"], 400);
    assert!(v["discrepancies"].as_array().unwrap().is_empty());
}

#[test]
fn corrupted_cache_exits_with_verification_failure() {
    let dir = TempDir::new().unwrap();
    let s = stream(&dir, 200);
    let o = eagr(&["verify-equivalence", "--config", "nano", "--in", path_str(&s), "--warmup", "50", "--inject-fault"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("verification failed"));
}

#[test]
fn usage_errors_exit_one() {
    let o = eagr(&["bench", "--bogus"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(code(&eagr(&["no-such-command"])), 1);
    let o = eagr(&["infer-dense", "--in", "x.evb", "--model", "w.eagw", "--seed", "1"]);
    assert_eq!(code(&o), 1);
    assert_eq!(code(&eagr(&["--help"])), 0);
}

#[test]
fn data_errors_exit_two() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("missing.evb");
    assert_eq!(code(&eagr(&["build-graph", "--in", path_str(&missing)])), 2);

    let garbage = dir.path().join("garbage.evb");
    std::fs::write(&garbage, b"not an event file").unwrap();
    assert_eq!(code(&eagr(&["build-graph", "--in", path_str(&garbage)])), 2);

    let s = stream(&dir, 100);
    let w = dir.path().join("nano.eagw");
    assert_eq!(code(&eagr(&["init-weights", "--config", "nano", "--out", path_str(&w)])), 0);
    let o = eagr(&["infer-dense", "--config", "small", "--model", path_str(&w), "--in", path_str(&s)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("shape mismatch"));
}

#[test]
fn bench_reports_dense_and_async_cost() {
    let dir = TempDir::new().unwrap();
    let s = stream(&dir, 400);
    let out = dir.path().join("bench.json");
    let o = eagr(&["bench", "--config", "nano", "--seed", "2", "--in", path_str(&s), "--out", path_str(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(&out);
    let dense = v["dense_flops"].as_f64().unwrap();
    let per_event = v["mean_async_flops_per_event"].as_f64().unwrap();
    let ratio = v["dense_to_async_ratio"].as_f64().unwrap();
    assert!(dense > 0.0 && per_event > 0.0);
    assert!((ratio - dense / per_event).abs() <= 1e-6 * ratio);
    let phi = v["phi"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&phi));
    assert_eq!(v["insertions"], 80);
}

#[test]
fn async_report_feeds_stats_csv() {
    let dir = TempDir::new().unwrap();
    let s = stream(&dir, 300);
    let report = dir.path().join("report.json");
    let o = eagr(&["infer-async", "--config", "nano", "--in", path_str(&s), "--warmup", "200", "--report", path_str(&report)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = dir.path().join("stats.csv");
    assert_eq!(code(&eagr(&["stats", "--report", path_str(&report), "--out", path_str(&csv)])), 0);
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("layer,mean_flops,p_pos_change,p_feat_change,prune_rate"));
    let rows: Vec<&str> = lines.collect();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r.split(',').count() == 5));
}

#[test]
fn identical_runs_write_identical_bytes() {
    let dir = TempDir::new().unwrap();
    let s = stream(&dir, 300);
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = eagr(&["infer-dense", "--config", "nano", "--seed", "3", "--in", path_str(&s), "--out", path_str(&out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(out).unwrap()
    };
    assert_eq!(run("a.json"), run("b.json"));

    let again = dir.path().join("again.evb");
    eagr(&["gen-synthetic", "--pattern", "bar", "--seed", "1", "--max-events", "300", "--out", path_str(&again)]);
    assert_eq!(std::fs::read(&s).unwrap(), std::fs::read(&again).unwrap());
}
