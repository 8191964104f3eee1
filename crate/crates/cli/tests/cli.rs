use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &[&str] = &[
    "--participants", "8", "--train-batch", "20", "--test-size", "10", "--holdout", "60",
    "--dim", "8", "--separation", "4", "--center-epochs", "20",
];

fn lazyinf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lazyinf")).args(args).output().expect("binary runs")
}

fn ok(output: &Output) {
    assert!(
        output.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        output.status,
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn run_tiny(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", "--out", out.to_str().unwrap()];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    lazyinf(&args)
}

#[test]
fn run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    ok(&run_tiny(&out, &["--seeds", "0,3"]));
    for name in ["config.json", "outcome_0.json", "outcome_3.json", "votes_0.csv", "partition_3.json", "metrics.csv", "summary.json"] {
        assert!(out.join(name).is_file(), "missing {name}");
    }
    let outcome = json(&out.join("outcome_0.json"));
    assert_eq!(outcome["rounds"][0]["vote_count"], 8 * 7);
    let votes = fs::read_to_string(out.join("votes_0.csv")).unwrap();
    assert!(votes.starts_with("round,contributor_id,tester_id,true_sign,released_sign\n"));
    assert_eq!(votes.lines().count(), 1 + 8 * 7);
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("preset,cell,seed,metric,value\ncustom,base,0,recall,"));
    let summary = json(&out.join("summary.json"));
    assert_eq!(summary["preset"], "custom");
    assert_eq!(summary["cells"][0]["metrics"]["recall"]["runs"], 2);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&run_tiny(&a, &["--seeds", "5"]));
    ok(&run_tiny(&b, &["--seeds", "5"]));
    for name in ["outcome_5.json", "votes_5.csv", "partition_5.json", "metrics.csv", "summary.json"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name} differs");
    }
}

#[test]
fn empty_config_gives_library_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("empty.json");
    fs::write(&cfg, "{}").unwrap();
    let out = dir.path().join("o");
    // `verify` resolves and snapshots the config like every verb; one tiny
    // instance keeps the test fast.
    let output = lazyinf(&["verify", "--config", cfg.to_str().unwrap(), "--instances", "1", "--out", out.to_str().unwrap()]);
    ok(&output);
    let snapshot = json(&out.join("config.json"));
    assert_eq!(snapshot["participants"], 100);
    assert_eq!(snapshot["epsilon"], 1.0);
    assert_eq!(snapshot["corrupt_frac"], 0.3);
    assert_eq!(snapshot["corrupt_points"], 0.9);
    assert_eq!(snapshot["train_batch"], 100);
    assert_eq!(snapshot["test_size"], 50);
    assert_eq!(snapshot["alpha"], "iid");
    assert_eq!(snapshot["preset"], "custom");
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"epsilon": 1, "lr": 0.2, "seeds": [2]}"#).unwrap();
    let out = dir.path().join("o");
    ok(&run_tiny(&out, &["--config", cfg.to_str().unwrap(), "--epsilon", "0.75"]));
    let snapshot = json(&out.join("config.json"));
    assert_eq!(snapshot["epsilon"], 0.75);
    assert_eq!(snapshot["lr"], 0.2);
    assert_eq!(snapshot["seeds"], serde_json::json!([2]));
    assert!(out.join("outcome_2.json").is_file());
}

#[test]
fn alpha_flag_selects_dirichlet_partition() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    ok(&run_tiny(&out, &["--alpha", "0.1"]));
    assert_eq!(json(&out.join("config.json"))["alpha"], 0.1);
    let report = json(&out.join("partition_0.json"));
    assert_eq!(report["distribution"], serde_json::json!({"kind": "dirichlet", "alpha": 0.1}));
    assert_eq!(report["participants"].as_array().unwrap().len(), 8);
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"epsilon": 1, "participnts": 10}"#).unwrap();
    let output = lazyinf(&["run", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("participnts"), "{stderr}");
    assert!(stderr.contains("stage `config`"), "{stderr}");
}

#[test]
fn invalid_values_fail_with_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let output = run_tiny(&dir.path().join("o"), &["--corrupt-frac", "1.5"]);
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("stage `config`"), "{stderr}");
    assert!(!dir.path().join("o").exists());
}

#[test]
fn sweep_over_custom_axes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s");
    let mut args = vec!["sweep", "--out", out.to_str().unwrap(), "--seeds", "0..2", "--axis", "epsilon=1,2"];
    args.extend_from_slice(TINY);
    ok(&lazyinf(&args));
    let summary = json(&out.join("summary.json"));
    let cells = summary["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 2);
    assert_eq!(cells[1]["cell"], "epsilon=2");
    assert_eq!(cells[1]["params"]["epsilon"], 2.0);
    assert_eq!(cells[1]["metrics"]["recall"]["runs"], 2);
    let rows = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(rows.lines().skip(1).all(|l| l.starts_with("custom,epsilon=")));
}

#[test]
fn fig2_preset_writes_accuracy_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("f");
    let mut args = vec!["sweep", "--preset", "fig2", "--out", out.to_str().unwrap(), "--seeds", "0"];
    args.extend_from_slice(TINY);
    ok(&lazyinf(&args));
    let table = fs::read_to_string(out.join("fig2.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(
        lines.next().unwrap(),
        "corrupt_frac,mislabel_rate,unfiltered_accuracy_mean,unfiltered_accuracy_std,oracle_accuracy_mean,oracle_accuracy_std,final_model_accuracy_mean,final_model_accuracy_std"
    );
    assert_eq!(lines.count(), 6);
    assert_eq!(json(&out.join("config.json"))["preset"], "fig2");
}

#[test]
fn table1_preset_summarizes_iid_and_non_iid() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t");
    let mut args = vec!["sweep", "--preset", "table1", "--out", out.to_str().unwrap(), "--seeds", "0..2"];
    args.extend_from_slice(TINY);
    ok(&lazyinf(&args));
    let summary = json(&out.join("summary.json"));
    let labels: Vec<&str> = summary["cells"].as_array().unwrap().iter().map(|c| c["cell"].as_str().unwrap()).collect();
    assert_eq!(labels, ["alpha=inf", "alpha=0.1"]);
    for cell in summary["cells"].as_array().unwrap() {
        for m in ["recall", "precision", "filtration_accuracy"] {
            assert!(cell["metrics"][m]["mean"].is_number());
            assert!(cell["metrics"][m]["std"].is_number());
        }
    }
}

#[test]
fn verify_reports_agreement() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("v");
    let output = lazyinf(&["verify", "--instances", "3", "--out", out.to_str().unwrap()]);
    ok(&output);
    assert!(String::from_utf8_lossy(&output.stdout).contains("sign agreement"));
    let report = json(&out.join("verify.json"));
    assert_eq!(report["report"]["instances"].as_array().unwrap().len(), 3);
    assert_eq!(report["passed"], true);
}
