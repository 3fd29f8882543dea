use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn dabs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dabs"))
        .args(args)
        .output()
        .expect("spawn dabs")
}

fn ok(args: &[&str]) -> String {
    let out = dabs(args);
    assert!(
        out.status.success(),
        "dabs {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn summary(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn replay_reproduces_an_estimate() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&[
        "estimate",
        "--scenario",
        "s1",
        "--method",
        "ad-sgd",
        "--budget",
        "200",
        "--out",
        path(&a),
    ]);
    for f in [
        "loss_history.csv",
        "policy.csv",
        "best_policy.csv",
        "summary.json",
        "manifest.json",
    ] {
        assert!(a.join(f).exists(), "missing {f}");
    }
    ok(&["replay", path(&a.join("manifest.json")), "--out", path(&b)]);
    for f in ["loss_history.csv", "policy.csv"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn zero_policy_evaluation_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["evaluate", "--scenario", "s2", "--runs", "5", "--out", path(&a)]);
    ok(&["evaluate", "--scenario", "s2", "--runs", "5", "--out", path(&b)]);
    assert_eq!(summary(&a), summary(&b));
    let trips = fs::read_to_string(a.join("trips.csv")).unwrap();
    assert!(trips.lines().count() > 1);
    assert_eq!(
        fs::read(a.join("inventory_error.csv")).unwrap(),
        fs::read(b.join("inventory_error.csv")).unwrap()
    );
}

#[test]
fn compare_flags_optimizers_without_updates() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("cmp");
    ok(&[
        "compare",
        "s2",
        "--method",
        "ad-sgd,fd-gd",
        "--budget",
        "100",
        "--runs",
        "2",
        "--out",
        path(&out),
    ]);
    let table = fs::read_to_string(out.join("summary.csv")).unwrap();
    let fd = table.lines().find(|l| l.starts_with("fd-gd")).expect("fd-gd row");
    assert!(fd.contains("no update completed"), "{fd}");
    assert!(out.join("traces.csv").exists());
}

#[test]
fn gradcheck_passes_on_s1() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("gc");
    ok(&["gradcheck", "--scenario", "s1", "--out", path(&out)]);
    let csv = fs::read_to_string(out.join("gradcheck.csv")).unwrap();
    assert!(csv.starts_with("index,block,station,ad,fd,abs_err,rel_err,pass"));
    assert!(csv.lines().skip(1).all(|l| l.ends_with("true")));
}

#[test]
fn unknown_scenario_is_an_error() {
    let tmp = TempDir::new().unwrap();
    let out = dabs(&["evaluate", "--scenario", "s9", "--out", path(tmp.path())]);
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());
}

#[test]
fn estimated_policy_beats_zero_policy() {
    let tmp = TempDir::new().unwrap();
    let (est, eval, zero) = (tmp.path().join("est"), tmp.path().join("eval"), tmp.path().join("zero"));
    ok(&["estimate", "s2", "ad-sgd", "--budget", "500", "--out", path(&est)]);
    let policy = est.join("policy.csv");
    ok(&[
        "evaluate",
        "s2",
        "--policy",
        path(&policy),
        "--runs",
        "5",
        "--out",
        path(&eval),
    ]);
    ok(&["evaluate", "s2", "--runs", "5", "--out", path(&zero)]);
    let fitted = summary(&eval)["loss"].as_f64().unwrap();
    let baseline = summary(&zero)["loss"].as_f64().unwrap();
    assert!(fitted < baseline, "fitted {fitted} vs zero {baseline}");
}
