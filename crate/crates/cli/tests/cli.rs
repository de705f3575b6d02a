use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn eianet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eianet"))
        .args(args)
        .env_remove("EIANET_THREADS")
        .output()
        .expect("run eianet")
}

fn ok_json(args: &[&str]) -> Value {
    let out = eianet(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: [&str; 10] = [
    "--classes",
    "4",
    "--feature-dim",
    "8",
    "--widths",
    "4,8,8",
    "--epochs-source",
    "2",
    "--batch-size",
    "16",
];

/// Generates data and trains a tiny source model; returns (data, checkpoint).
fn trained(dir: &Path) -> (String, String) {
    let data = dir.join("data");
    ok_json(&["gen-data", "--classes", "4", "--per-class", "10", "--seed", "1", "--out", path(&data)]);
    let src = dir.join("src");
    let mut args = vec!["train-source", "--data", path(&data), "--out", path(&src)];
    args.extend(TINY);
    ok_json(&args);
    (path(&data).to_string(), path(&src.join("checkpoint.bin")).to_string())
}

fn metrics(file: &Path) -> Vec<Value> {
    std::fs::read_to_string(file)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn source_metrics_stream_and_holdout_eval_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ck) = trained(tmp.path());
    let records = metrics(&tmp.path().join("src/metrics.jsonl"));
    assert_eq!(records.len(), 3);
    for (epoch, r) in records.iter().enumerate() {
        assert_eq!(r["schema"], 1);
        assert_eq!(r["phase"], "source");
        assert_eq!(r["epoch"], epoch);
        for key in ["ce_loss", "source_train_acc", "source_test_acc", "nc1", "nc2", "nc3", "nc4"] {
            assert!(r[key].as_f64().unwrap().is_finite(), "{key} in {r}");
        }
    }
    let source = format!("{data}/source");
    let eval = ok_json(&["eval", "--checkpoint", &ck, "--data", &source, "--split", "test"]);
    assert_eq!(eval["split"], "test");
    assert_eq!(eval["samples"], 8);
    assert_eq!(eval["accuracy"], records[2]["source_test_acc"]);
}

#[test]
fn adapt_without_diversity_reports_similarity_only() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ck) = trained(tmp.path());
    let out = tmp.path().join("adapt");
    let report = ok_json(&[
        "adapt",
        "--checkpoint",
        &ck,
        "--data",
        &data,
        "--out",
        path(&out),
        "--epochs-adapt",
        "2",
        "--alpha",
        "0",
    ]);
    assert!(report["source_only_target_acc"].as_f64().is_some());
    let records = metrics(&out.join("metrics.jsonl"));
    assert_eq!(records.len(), 2);
    for r in &records {
        assert_eq!(r["phase"], "adapt");
        assert_eq!(r["l_t"], r["l_sim"]);
        assert!(r["l_div"].as_f64().unwrap() <= 0.0);
    }
}

#[test]
fn etf_check_and_nc_report() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ck) = trained(tmp.path());
    let etf = ok_json(&["etf-check", "--checkpoint", &ck]);
    assert_eq!(etf["passed"], true);
    let fresh = ok_json(&["etf-check", "--classes", "10", "--dim", "64"]);
    assert!(fresh["max_offdiag_deviation"].as_f64().unwrap() < 1e-9);

    let nc = ok_json(&["nc-report", "--checkpoint", &ck, "--data", &data, "--split", "train"]);
    for key in ["nc1_variability", "nc2_angle_spread", "nc3_self_duality", "nc4_agreement"] {
        assert!(nc[key].as_f64().unwrap().is_finite(), "{key}");
    }
}

#[test]
fn failed_etf_check_exits_one_and_still_reports() {
    let out = eianet(&["etf-check", "--classes", "5", "--dim", "8", "--tolerance", "0"]);
    let value: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(value["passed"], false);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn configuration_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ck) = trained(tmp.path());
    // Fewer dimensions than classes.
    assert_eq!(eianet(&["etf-check", "--classes", "10", "--dim", "4"]).status.code(), Some(2));
    let out = tmp.path().join("bad");
    let mut args = vec!["train-source", "--data", &data, "--out", path(&out)];
    args.extend(TINY);
    args.extend(["--neighbors", "0"]);
    assert_eq!(eianet(&args).status.code(), Some(2));
    // A checkpoint trained for 4 classes against 6-class data.
    let other = tmp.path().join("six");
    ok_json(&["gen-data", "--classes", "6", "--per-class", "4", "--out", path(&other)]);
    let code = eianet(&["adapt", "--checkpoint", &ck, "--data", path(&other), "--out", path(&out)])
        .status
        .code();
    assert_eq!(code, Some(2));
    assert_eq!(eianet(&["adapt", "--bogus"]).status.code(), Some(2));
}

#[test]
fn io_and_format_errors_exit_three() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.bin");
    assert_eq!(eianet(&["etf-check", "--checkpoint", path(&missing)]).status.code(), Some(3));
    let garbage = tmp.path().join("garbage.bin");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    assert_eq!(eianet(&["etf-check", "--checkpoint", path(&garbage)]).status.code(), Some(3));

    let (data, _) = trained(tmp.path());
    std::fs::write(format!("{data}/source/labels.bin"), [0u8; 3]).unwrap();
    let out = tmp.path().join("x");
    let mut args = vec!["train-source", "--data", &data, "--out", path(&out)];
    args.extend(TINY);
    assert_eq!(eianet(&args).status.code(), Some(3));
}

#[test]
fn thread_count_does_not_change_results() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ck) = trained(tmp.path());
    let run = |threads: &str| {
        Command::new(env!("CARGO_BIN_EXE_eianet"))
            .args(["eval", "--checkpoint", &ck, "--data", &data])
            .env("EIANET_THREADS", threads)
            .output()
            .unwrap()
    };
    let (one, four) = (run("1"), run("4"));
    assert!(one.status.success());
    assert_eq!(one.stdout, four.stdout);
    assert_eq!(run("zero").status.code(), Some(2));
}
