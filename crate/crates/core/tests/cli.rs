use std::path::Path;
use std::process::{Command, Output};

fn cli(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cover-decode"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = cli(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn simulate(dir: &Path) {
    let common = ["simulate", "--vocab", "10", "--head", "4", "--max-len", "4", "--tail-mass", "0.1"];
    let mut a = common.to_vec();
    a.extend(["--seed", "1", "--n", "600", "--model-out", "ar.json", "--config-out", "gen.json", "--out", "calib.jsonl"]);
    ok(dir, &a);
    ok(dir, &["simulate", "--ar-model", "ar.json", "--seed", "2", "--n", "300", "--out", "eval.jsonl"]);
}

#[test]
fn end_to_end_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    simulate(d);
    ok(
        d,
        &[
            "calibrate", "--traces", "calib.jsonl", "--max-len", "4", "--clusters", "2", "--min-count", "10", "--budget", "100",
            "--bucket-width", "2", "--audit-out", "audit.json", "--out", "model.json",
        ],
    );
    let model: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("model.json")).unwrap()).unwrap();
    assert_eq!(model["M"], 2);
    let audit: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("audit.json")).unwrap()).unwrap();
    assert_eq!(audit["log"].as_array().unwrap().len(), 100);

    let out = ok(d, &["decode", "--model", "model.json", "--ar-model", "ar.json"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().all(|l| serde_json::from_str::<Vec<u32>>(l).is_ok()));

    ok(d, &["dcbs", "--traces", "calib.jsonl", "--max-len", "4", "--out", "dcbs.json"]);
    ok(d, &["decode", "--dcbs", "dcbs.json", "--ar-model", "ar.json", "--out", "set.jsonl"]);

    let out = ok(
        d,
        &[
            "evaluate", "--method", "split", "--ar-model", "ar.json", "--calib", "calib.jsonl", "--eval", "eval.jsonl", "--generator",
            "gen.json", "--max-len", "4",
        ],
    );
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["n"], 300);

    // The written generator document reproduces the same model.
    ok(d, &["simulate", "--config", "gen.json", "--n", "10", "--model-out", "ar2.json", "--out", "x.jsonl"]);
    assert_eq!(std::fs::read(d.join("ar.json")).unwrap(), std::fs::read(d.join("ar2.json")).unwrap());

    ok(
        d,
        &[
            "compare", "--methods", "dcbs,cover", "--ar-model", "ar.json", "--calib", "calib.jsonl", "--eval", "eval.jsonl",
            "--tail-tokens", "4-9", "--max-len", "4", "--clusters", "2", "--format", "csv", "--out", "cmp.csv",
        ],
    );
    assert!(std::fs::read_to_string(d.join("cmp.csv")).unwrap().contains("summary"));

    let out = ok(d, &["bounds", "--model", "model.json", "--traces", "eval.jsonl", "--variant", "appendix"]);
    let bound: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(bound["aggregate"].as_f64().unwrap() >= 0.0);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    simulate(d);
    // Missing file: I/O error.
    assert_eq!(cli(d, &["dcbs", "--traces", "nope.jsonl"]).status.code(), Some(1));
    // Invalid level.
    assert_eq!(cli(d, &["dcbs", "--traces", "calib.jsonl", "--alpha", "1.5"]).status.code(), Some(2));
    // Calibration and evaluation share ids.
    let out = cli(d, &["evaluate", "--method", "dcbs", "--ar-model", "ar.json", "--calib", "calib.jsonl", "--eval", "calib.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("overlap"));
    // Traces longer than max_len can never be covered.
    assert_eq!(
        cli(d, &["calibrate", "--traces", "calib.jsonl", "--max-len", "1", "--clusters", "1", "--alpha", "0.01"]).status.code(),
        Some(3)
    );
    // Malformed trace line.
    std::fs::write(d.join("bad.jsonl"), "{\n").unwrap();
    let out = cli(d, &["dcbs", "--traces", "bad.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.jsonl:1"));
}
