//! End-to-end runs of the `saliency-audit` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_saliency-audit");
const SMALL: &[&str] = &["--n-train", "200", "--n-test", "20"];

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("SALIENCY_AUDIT_SEED")
        .output()
        .expect("spawn")
}

fn ok(args: &[&str]) -> Value {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

/// Runs a command that writes its record to `--out` and returns that record.
fn ok_file(args: &[&str], out: &Path) -> Value {
    let status = run(args);
    assert!(
        status.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&status.stderr)
    );
    assert!(status.stdout.is_empty());
    serde_json::from_str(&std::fs::read_to_string(out).unwrap()).unwrap()
}

fn args<'a>(head: &[&'a str], tail: &[&'a str]) -> Vec<&'a str> {
    head.iter().chain(SMALL).chain(tail).copied().collect()
}

/// A one-epoch digits checkpoint shared by the tests in this binary.
fn checkpoint() -> &'static Path {
    static DIR: OnceLock<(tempfile::TempDir, PathBuf)> = OnceLock::new();
    let (_, path) = DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("digits.ckpt");
        let p = path.to_str().unwrap().to_string();
        let out = dir.path().join("train.json");
        ok_file(
            &args(
                &["train", "--model", &p],
                &["--epochs", "1", "--out", out.to_str().unwrap()],
            ),
            &out,
        );
        (dir, path)
    });
    path
}

fn model() -> &'static str {
    checkpoint().to_str().unwrap()
}

#[test]
fn train_reports_layers_and_history() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let out = dir.path().join("train.json");
    let rec = ok_file(
        &args(
            &["train", "--model", ckpt.to_str().unwrap()],
            &["--epochs", "2", "--seed", "3", "--out", out.to_str().unwrap()],
        ),
        &out,
    );
    assert_eq!(rec["schema_version"], 1);
    assert_eq!(rec["seed"], 3);
    assert_eq!(rec["command"][0], "train");
    assert_eq!(rec["results"]["history"].as_array().unwrap().len(), 2);
    assert_eq!(
        rec["results"]["layers"],
        serde_json::json!(["conv1", "conv2", "fc1", "fc2"])
    );
    assert!(ckpt.exists());
}

#[test]
fn cascade_has_one_stage_per_layer_plus_original() {
    let v = ok(&args(
        &["sanity-cascade", "--model", model()],
        &[
            "--trials",
            "2",
            "--inputs",
            "2",
            "--steps",
            "4",
            "--no-sensitivity",
            "--infidelity-samples",
            "2",
            "--seed",
            "7",
        ],
    ));
    let stages = v["results"]["stages"].as_array().unwrap();
    assert_eq!(stages.len(), 5);
    assert_eq!(stages[0]["layer"], "original");
    assert_eq!(stages[1]["layer"], "fc2");
    let labels: Vec<&str> = stages[0]["explainers"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["explainer"].as_str().unwrap())
        .collect();
    assert_eq!(labels, ["ig/global", "ig/local"]);
    assert!(v.get("timing").is_none());
}

#[test]
fn identical_commands_give_identical_bytes() {
    let cmd = args(
        &["sanity-cascade", "--model", model()],
        &[
            "--trials",
            "2",
            "--inputs",
            "2",
            "--steps",
            "4",
            "--sens-samples",
            "1",
            "--infidelity-samples",
            "2",
            "--seed",
            "11",
        ],
    );
    let (a, b) = (run(&cmd), run(&cmd));
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let other = run(&[&cmd[..cmd.len() - 1], &["12"]].concat());
    assert_ne!(a.stdout, other.stdout);
}

#[test]
fn environment_seed_overrides_the_flag() {
    let cmd = args(
        &["metrics", "--model", model()],
        &["--samples", "3", "--sens-samples", "1", "--steps", "4"],
    );
    let with_env = Command::new(BIN)
        .args(&cmd)
        .env("SALIENCY_AUDIT_SEED", "42")
        .output()
        .unwrap();
    assert!(with_env.status.success());
    let v: Value = serde_json::from_slice(&with_env.stdout).unwrap();
    assert_eq!(v["seed"], 42);
    let flagged = ok(&[&cmd[..], &["--seed", "42"]].concat());
    assert_eq!(v["results"], flagged["results"]);
    let bad = Command::new(BIN)
        .args(&cmd)
        .env("SALIENCY_AUDIT_SEED", "seven")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn explain_writes_maps_and_rejects_zero_steps() {
    let dir = tempfile::tempdir().unwrap();
    let pgm = dir.path().join("map.pgm");
    let v = ok(&args(
        &["explain", "--model", model()],
        &[
            "--method",
            "ig",
            "--variant",
            "local",
            "--steps",
            "8",
            "--index",
            "3",
            "--pgm",
            pgm.to_str().unwrap(),
        ],
    ));
    assert_eq!(v["results"]["attribution"]["shape"], serde_json::json!([1, 28, 28]));
    let bytes = std::fs::read(&pgm).unwrap();
    assert!(bytes.starts_with(b"P5\n28 28\n255\n"));
    assert_eq!(bytes.len(), 13 + 784);

    let zero = run(&args(&["explain", "--model", model()], &["--steps", "0"]));
    assert_eq!(zero.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&zero.stderr).contains("steps"));
    let far = run(&args(&["explain", "--model", model()], &["--index", "999"]));
    assert_eq!(far.status.code(), Some(2));
}

#[test]
fn metrics_log_samples_on_request() {
    let v = ok(&args(
        &["metrics", "--model", model()],
        &[
            "--perturbation",
            "baseline_diff",
            "--sens-samples",
            "2",
            "--steps",
            "8",
            "--log-samples",
        ],
    ));
    let inf = &v["results"]["infidelity"];
    assert_eq!(inf["errors"].as_array().unwrap().len(), 1);
    assert_eq!(inf["perturbations"].as_array().unwrap().len(), 1);
    assert_eq!(v["results"]["max_sensitivity"]["deltas"].as_array().unwrap().len(), 2);
}

#[test]
fn csv_and_file_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (json, csv) = (dir.path().join("run.json"), dir.path().join("run.csv"));
    let rec = ok_file(
        &args(
            &["sweep", "--model", model()],
            &[
                "--inputs",
                "1",
                "--steps",
                "4",
                "--slice-samples",
                "5",
                "--slice-dims",
                "2",
                "--no-sensitivity",
                "--infidelity-samples",
                "2",
                "--out",
                json.to_str().unwrap(),
                "--csv",
                csv.to_str().unwrap(),
            ],
        ),
        &json,
    );
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("path,value\n"));
    assert!(text.contains("results.variants[3].name,softplus+lsepool"));
    assert_eq!(rec["results"]["variants"].as_array().unwrap().len(), 4);
}

#[test]
fn usage_and_computation_errors_have_distinct_codes() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(
        run(&["explain", "--model", model(), "--method", "deeplift"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    let missing = run(&["explain", "--model", "/nonexistent/model.ckpt"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error: "));
    // A checkpoint trained on digits cannot explain the text corpus.
    let wrong = run(&["explain", "--model", model(), "--data", "text"]);
    assert_ne!(wrong.status.code(), Some(0));
}
