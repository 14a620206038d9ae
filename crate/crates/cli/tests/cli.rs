//! End-to-end tests of the `hiercomp` binary: exit codes, run directories,
//! byte-identical reruns and replay.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hiercomp"))
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Every file under `dir`, keyed by relative path. The manifest's
/// wall-clock field is blanked since it is the one field allowed to differ.
fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                let mut bytes = fs::read(&path).unwrap();
                if rel == "manifest.json" {
                    let mut doc: Value = serde_json::from_slice(&bytes).unwrap();
                    doc["wall_clock_seconds"] = Value::from(0.0);
                    bytes = serde_json::to_vec(&doc).unwrap();
                }
                out.push((rel, bytes));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

fn short_toy_config(dir: &Path) -> PathBuf {
    let text = fs::read_to_string(fixture("toy.toml")).unwrap();
    let text = text
        .replace("epochs = 300", "epochs = 2")
        .replace("eval_samples = 50", "eval_samples = 4")
        .replace("n_per_combination = 64", "n_per_combination = 8");
    assert!(text.contains("epochs = 2"), "fixture layout changed");
    let path = dir.join("toy.toml");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn validate_exit_codes_follow_the_verdict() {
    assert_eq!(code(&run(&["validate", p(&fixture("layered.toml"))])), 0);
    let bad = run(&["validate", p(&fixture("cross-level.toml"))]);
    assert_eq!(code(&bad), 1);
    assert!(String::from_utf8_lossy(&bad.stdout).contains("z1.1"));
    assert_eq!(code(&run(&["validate", "/nonexistent/model.toml"])), 2);
}

#[test]
fn composability_is_negative_when_a_candidate_is_uncertified() {
    let singleton =
        run(&["composability", p(&fixture("two-root-singleton.toml")), "--train", p(&fixture("train-two-root.txt"))]);
    assert_eq!(code(&singleton), 0, "{}", String::from_utf8_lossy(&singleton.stdout));
    let joint =
        run(&["composability", p(&fixture("two-root-joint.toml")), "--train", p(&fixture("train-two-root.txt"))]);
    assert_eq!(code(&joint), 1);
}

#[test]
fn empty_training_support_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.txt");
    fs::write(&empty, "# nothing here\n\n").unwrap();
    let out = run(&["composability", p(&fixture("two-root-singleton.toml")), "--train", p(&empty)]);
    assert_eq!(code(&out), 2);
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("empty")
            || String::from_utf8_lossy(&out.stderr).contains("no combinations")
    );
}

#[test]
fn unknown_arm_is_a_usage_error() {
    assert_eq!(code(&run(&["toy", "--arm", "bogus"])), 2);
}

#[test]
fn identify_reports_violated_variability() {
    let out = run(&["identify", p(&fixture("parent-free.toml")), "--checks", "variability", "--probes", "5"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stdout).contains("VIOLATED"));
    let ok = run(&["identify", p(&fixture("location-scale.toml")), "--probes", "5", "--ci-rows", "2000"]);
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stdout));
}

#[test]
fn reruns_are_byte_identical_and_replay_reproduces_them() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    let args = |out: &Path| {
        vec![
            "recover".to_string(),
            "--model".into(),
            p(&fixture("chain3.toml")).into(),
            "--n".into(),
            "4000".into(),
            "--seed".into(),
            "5".into(),
            "--out".into(),
            p(out).into(),
        ]
    };
    let first = bin().args(args(&a)).output().unwrap();
    let second = bin().args(args(&b)).output().unwrap();
    assert_eq!(code(&first), 0, "{}", String::from_utf8_lossy(&first.stderr));
    assert_eq!(first.stdout, second.stdout);
    assert_eq!(snapshot(&a), snapshot(&b));
    let replay = run(&["replay", p(&a.join("manifest.json")), "--out", p(&c)]);
    assert_eq!(code(&replay), 0);
    assert_eq!(snapshot(&a), snapshot(&c));

    let report = fs::read_to_string(a.join("report.txt")).unwrap();
    let manifest: Value = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert!(report.starts_with(&format!("run {}\n", manifest["id"].as_str().unwrap())));
    assert_eq!(manifest["seed"], 5);
    assert!(manifest["model_hash"].is_string());
}

#[test]
fn replay_refuses_changed_batch_files() {
    let dir = tempfile::tempdir().unwrap();
    let sampled = dir.path().join("sampled");
    let recovered = dir.path().join("recovered");
    assert_eq!(code(&run(&["sample", p(&fixture("chain.toml")), "--n", "500", "--out", p(&sampled)])), 0);
    let batch = sampled.join("batch.csv");
    let out = run(&["recover", "--model", p(&fixture("chain.toml")), "--batch", p(&batch), "--out", p(&recovered)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let mut text = fs::read_to_string(&batch).unwrap();
    text.push_str("0.0,0.0,0.0,0.0\n");
    fs::write(&batch, text).unwrap();
    let replay = run(&["replay", p(&recovered.join("manifest.json"))]);
    assert_eq!(code(&replay), 2);
}

#[test]
fn toy_arms_produce_artifacts_and_a_paired_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let config = short_toy_config(dir.path());
    let out_dir = dir.path().join("run");
    let out = run(&["toy", "--config", p(&config), "--arm", "full", "--arm", "no-sr", "--out", p(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("paired comparison: full vs no-sr"), "{stdout}");
    for arm in ["full", "no-sr"] {
        for file in ["metrics.csv", "summary.json", "report.txt", "split.toml", "denoiser.bin", "denoiser.toml"] {
            assert!(out_dir.join(arm).join(file).is_file(), "{arm}/{file}");
        }
        let metrics = fs::read_to_string(out_dir.join(arm).join("metrics.csv")).unwrap();
        assert_eq!(metrics.lines().count(), 1 + 2, "header plus one row per epoch");
    }
    let again = dir.path().join("again");
    let rerun = run(&["toy", "--config", p(&config), "--arm", "full", "--arm", "no-sr", "--out", p(&again)]);
    assert_eq!(code(&rerun), 0);
    assert_eq!(snapshot(&out_dir), snapshot(&again));
}

#[test]
fn liberal_alpha_reports_a_score_instead_of_failing() {
    let out = run(&["recover", "--model", p(&fixture("layered.toml")), "--n", "4000", "--alpha", "0.5"]);
    assert!(code(&out) <= 1, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("precision") && stdout.contains("exact_match"), "{stdout}");
}
