use std::path::Path;
use std::process::{Command, Output};

fn adcost(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adcost")).args(args).current_dir(dir).output().unwrap()
}

fn ok(args: &[&str], dir: &Path) -> Output {
    let out = adcost(args, dir);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn simulate(dir: &Path, name: &str, seed: &str) {
    ok(&["simulate", "--seed", seed, "--users", "30", "--days", "2", "--out", name], dir);
}

#[test]
fn simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "a", "7");
    simulate(dir.path(), "b", "7");
    for f in ["weblog.jsonl", "sealed_ledger.json", "ground_truth.jsonl", "auctions.jsonl"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        assert_eq!(a, std::fs::read(dir.path().join("b").join(f)).unwrap(), "{f}");
        assert!(!a.is_empty());
    }
}

#[test]
fn analyze_is_byte_identical_and_needs_a_model() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    simulate(d, "sim", "3");
    ok(&["train", "--input", "sim/ground_truth.jsonl", "--trees", "10", "--out", "m"], d);
    let args = |out: &'static str| {
        vec![
            "analyze",
            "--input",
            "sim/weblog.jsonl",
            "--geo",
            "sim/geo.csv",
            "--iab-map",
            "sim/iab_map.csv",
            "--model",
            "m/model.json",
            "--out",
            out,
        ]
    };
    ok(&args("r1"), d);
    ok(&args("r2"), d);
    for f in ["user_reports.jsonl", "cohort.csv", "cdf.csv", "iab.csv", "scatter.csv", "analysis_stats.json"] {
        assert_eq!(std::fs::read(d.join("r1").join(f)).unwrap(), std::fs::read(d.join("r2").join(f)).unwrap(), "{f}");
    }
    let reports = std::fs::read_to_string(d.join("r1/user_reports.jsonl")).unwrap();
    for line in reports.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let micros = |k: &str| (v[k].as_f64().unwrap() * 1e6).round() as i64;
        assert_eq!(micros("total_cpm"), micros("cleartext_cpm") + micros("encrypted_cpm"));
    }
    let out = adcost(&["analyze", "--input", "sim/weblog.jsonl", "--out", "r3"], d);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("needs a price model"));
}

#[test]
fn stdin_streaming_matches_batch_totals() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut cfg = serde_json::json!({ "sim": { "adxs": [
        { "adx_id": "mopub", "policy": "cleartext", "template": "mopub", "weight": 1.0 }
    ] } });
    cfg["sim"]["seed"] = 4.into();
    std::fs::write(d.join("cfg.json"), cfg.to_string()).unwrap();
    ok(&["--config", "cfg.json", "simulate", "--users", "10", "--days", "1", "--out", "sim"], d);
    ok(&["analyze", "--input", "sim/weblog.jsonl", "--out", "batch"], d);
    let weblog = std::fs::File::open(d.join("sim/weblog.jsonl")).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_adcost"))
        .args(["analyze", "--stdin", "--out", "stream"])
        .current_dir(d)
        .stdin(weblog)
        .output()
        .unwrap();
    assert!(out.status.success());
    let tallies = String::from_utf8(out.stdout).unwrap();
    assert!(tallies.lines().count() > 10);
    assert_eq!(
        std::fs::read(d.join("batch/user_reports.jsonl")).unwrap(),
        std::fs::read(d.join("stream/user_reports.jsonl")).unwrap()
    );
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.json"), r#"{"unknown_key": 1}"#).unwrap();
    assert_eq!(adcost(&["--config", "bad.json", "plan"], d).status.code(), Some(2));
    std::fs::write(d.join("missing.json"), r#"{"paths": {"model": "nope.json"}}"#).unwrap();
    assert_eq!(adcost(&["--config", "missing.json", "plan"], d).status.code(), Some(2));
    assert_eq!(adcost(&["plan", "--no-such-flag"], d).status.code(), Some(2));
    assert_eq!(adcost(&["analyze", "--input", "x.jsonl"], d).status.code(), Some(2));
}

#[test]
fn plan_paper_144_writes_144_setups() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["plan", "--paper-144", "--out", "p"], dir.path());
    let plan: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("p/plan.json")).unwrap()).unwrap();
    assert_eq!(plan["setups"].as_array().unwrap().len(), 144);
    assert_eq!(plan["sample_size"]["impressions_per_setup"], 186);
}

#[test]
fn flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("cfg.json"), r#"{"campaign": {"strategy": "paper_144", "max_bid_cpm": 2.0}}"#).unwrap();
    let from_cfg: serde_json::Value = serde_json::from_slice(&ok(&["--config", "cfg.json", "plan"], d).stdout).unwrap();
    assert_eq!(from_cfg["setups"].as_array().unwrap().len(), 144);
    assert_eq!(from_cfg["max_bid_cpm"], 2.0);
    let flagged: serde_json::Value =
        serde_json::from_slice(&ok(&["--config", "cfg.json", "plan", "--max-bid", "3"], d).stdout).unwrap();
    assert_eq!(flagged["max_bid_cpm"], 3.0);
}

#[test]
fn evaluate_emits_metrics_json() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    simulate(d, "sim", "5");
    let out = ok(
        &[
            "evaluate",
            "--input",
            "sim/ground_truth.jsonl",
            "--folds",
            "3",
            "--runs",
            "2",
            "--trees",
            "10",
            "--out",
            "e",
        ],
        d,
    );
    let m: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for k in ["tp_rate", "fp_rate", "precision", "recall", "auc_roc", "oob_error", "accuracy", "confusion"] {
        assert!(m.get(k).is_some(), "{k}");
    }
    assert!(d.join("e/eval.json").is_file());
}

#[test]
fn report_writes_arpu_table() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    simulate(d, "sim", "6");
    ok(&["train", "--input", "sim/ground_truth.jsonl", "--trees", "5", "--out", "m"], d);
    ok(&["analyze", "--input", "sim/weblog.jsonl", "--model", "m/model.json", "--out", "r"], d);
    assert_eq!(adcost(&["report", "--reports", "r/user_reports.jsonl", "--out", "rep"], d).status.code(), Some(2));
    ok(&["report", "--reports", "r/user_reports.jsonl", "--days", "2", "--out", "rep"], d);
    let csv = std::fs::read_to_string(d.join("rep/arpu.csv")).unwrap();
    assert_eq!(csv.lines().count(), 9);
    assert!(d.join("rep/cohort.csv").is_file());
}
