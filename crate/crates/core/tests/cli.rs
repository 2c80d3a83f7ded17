use std::process::{Command, Output};

fn timemark(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_timemark"))
        .args(args)
        .output()
        .unwrap()
}

fn error_record(out: &Output) -> serde_json::Value {
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    let line = stderr.lines().last().unwrap();
    let record: serde_json::Value = serde_json::from_str(line).unwrap();
    assert_eq!(record["status"], "error");
    record
}

#[test]
fn reward_prints_breakdown() {
    let out = timemark(&["reward", "--markers", "0.9,1.6,3.8,7.2,9.4,11.0,15.0", "--target", "15"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["total"], 3.0);
    assert_eq!(v["copy"], 0.0);

    let out = timemark(&["reward", "--markers", "10,10,10", "--target", "10"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["total"], 0.6666666667);

    let out = timemark(&[
        "reward",
        "--markers",
        "15",
        "--target",
        "15",
        "--set",
        "reward.weights.main=3",
    ]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["total"], 5.0);

    let out = timemark(&["reward", "--markers", "5,12", "--target", "10", "--sigma", "2"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["main"], 0.6065306597);
}

#[test]
fn failures_exit_nonzero_with_error_record() {
    let record = error_record(&timemark(&["reward", "--markers", "1.0", "--target", "-3"]));
    assert!(record["error"].as_str().unwrap().contains("positive"));

    let record = error_record(&timemark(&[
        "reward",
        "--markers",
        "1.0",
        "--target",
        "3",
        "--set",
        "no.such=1",
    ]));
    assert!(record["error"].as_str().unwrap().contains("no.such"));

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.jsonl");
    let out = dir.path().to_str().unwrap();
    let record = error_record(&timemark(&[
        "stats",
        "--dataset",
        missing.to_str().unwrap(),
        "--out",
        out,
    ]));
    assert!(!record["chain"].as_array().unwrap().is_empty());
}

#[test]
fn make_durations_writes_table_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = timemark(&["make-durations", "--seed", "3", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success());
    let table: serde_json::Map<String, serde_json::Value> =
        serde_json::from_slice(&std::fs::read(dir.path().join("durations.json")).unwrap()).unwrap();
    assert!(table
        .values()
        .filter_map(|v| v.as_f64())
        .any(|d| (0.2..=0.8).contains(&d)));
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("manifest_make-durations.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);

    let out = timemark(&[
        "make-durations",
        "--kl-beta",
        "10",
        "--epochs",
        "0",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("manifest_make-durations.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["grpo.kl_beta"], 10.0);
    assert_eq!(manifest["config"]["sft.epochs"], 0);
}
