use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vulnlab_core::datasetgen::{samples_to_jsonl, BundleMetadata};
use vulnlab_core::model::{LanguageModel, ModelConfig};
use vulnlab_core::packing::{FunctionSample, Regime};

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/commits10.jsonl")
}

fn vulnlab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vulnlab"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = vulnlab(dir, args);
    assert!(
        out.status.success(),
        "vulnlab {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn metadata(dir: &Path) -> BundleMetadata {
    serde_json::from_str(&fs::read_to_string(dir.join("metadata.json")).unwrap()).unwrap()
}

/// Small balanced dataset at `dir/x1`, shared by the training tests.
fn small_dataset(dir: &Path) {
    ok(dir, &["data", "synth", "--out", "commits.jsonl", "--seed", "5", "--n-pos", "20"]);
    ok(dir, &["data", "build", "--commits", "commits.jsonl", "--out", "x1", "--seed", "5"]);
}

const TINY: &str = r#"
name = "tiny"
data = "x1"
out = "runs/tiny"
model_seed = 2

[model]
n_layers = 1
n_heads = 2
d_model = 16
context_size = 64

[train]
lr_max = 1e-3
epochs = 2
context_size = 64
seed = 2
"#;

#[test]
fn build_without_p3_is_balanced() {
    let tmp = tempfile::tempdir().unwrap();
    let f = fixture();
    ok(
        tmp.path(),
        &["data", "build", "--commits", f.to_str().unwrap(), "--out", "b", "--include-p3=false"],
    );
    let m = metadata(&tmp.path().join("b"));
    assert_eq!(m.positives, 4);
    assert_eq!(m.negatives, 4);
    assert_eq!(m.class_ratio, Some(1.0));
    for split in ["train", "validation", "test"] {
        assert!(tmp.path().join("b").join(format!("{split}.jsonl")).is_file());
    }
}

#[test]
fn build_with_easy_negatives_matches_heavy_imbalance() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["data", "synth", "--out", "c.jsonl", "--seed", "9", "--n-pos", "30", "--n-neg-easy", "1020"]);
    ok(d, &["data", "build", "--commits", "c.jsonl", "--out", "b", "--include-p3"]);
    let m = metadata(&d.join("b"));
    assert_eq!(m.positives, 30);
    let ratio = m.class_ratio.unwrap();
    assert!((33.0..=36.0).contains(&ratio), "ratio 1:{ratio}");
}

#[test]
fn stats_on_empty_file_prints_zero_tables() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("empty.jsonl"), "").unwrap();
    let text = ok(tmp.path(), &["data", "stats", "--input", "empty.jsonl", "--out", "st"]);
    assert!(text.contains("0-10"));
    let csv = fs::read_to_string(tmp.path().join("st/histogram.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",0")), "{csv}");
}

#[test]
fn missing_input_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = vulnlab(tmp.path(), &["data", "stats", "--input", "nope.jsonl"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("not found"));
}

#[test]
fn rq5_preset_emits_two_row_table() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_dataset(d);
    let table = ok(
        d,
        &["train", "--preset", "rq5", "--data", "x1", "--out", "rq5", "--epochs", "1", "--context-size", "64"],
    );
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 4, "{table}");
    assert!(lines[0].contains("Validation ROC AUC"));
    assert!(lines[2].starts_with("Mean") || lines[2].starts_with("Sum"));
    assert_eq!(fs::read_to_string(d.join("rq5/summary.txt")).unwrap(), table);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("rq5/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["runs"].as_array().unwrap().len(), 2);
}

#[test]
fn rq7_focal_preset_emits_four_gamma_columns() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_dataset(d);
    let table = ok(
        d,
        &["train", "--preset", "rq7-focal", "--data", "x1", "--out", "focal", "--epochs", "1", "--context-size", "64"],
    );
    let head: Vec<&str> = table.lines().next().unwrap().split(" | ").map(str::trim).collect();
    assert_eq!(head.len(), 5, "{table}");
    assert_eq!(&head[1..], ["γ=0", "γ=1", "γ=3", "γ=5"]);
    for slug in ["gamma-0", "gamma-1", "gamma-3", "gamma-5"] {
        assert!(d.join("focal").join(slug).join("checkpoint.json").is_file(), "{slug}");
    }
}

#[test]
fn training_is_byte_reproducible_and_leaves_no_temp_files() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_dataset(d);
    fs::write(d.join("tiny.toml"), TINY).unwrap();
    ok(d, &["train", "--config", "tiny.toml"]);
    let run = d.join("runs/tiny/run");
    let mut names: Vec<String> = fs::read_dir(&run)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["checkpoint.json", "config.json", "history.jsonl", "report.json"]);

    let snapshot = |p: &Path| {
        names.iter().map(|n| fs::read(p.join(n)).unwrap()).collect::<Vec<_>>()
    };
    let first = snapshot(&run);
    ok(d, &["train", "--config", "tiny.toml"]);
    assert_eq!(first, snapshot(&run));
}

#[test]
fn failed_write_keeps_previous_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("checkpoint.json");
    vulnlab_cli::write_atomic(&path, b"old").unwrap();
    // A directory where the temp file must go cannot be created under a regular file.
    let bad = path.join("nested.json");
    assert!(vulnlab_cli::write_atomic(&bad, b"new").is_err());
    assert_eq!(fs::read(&path).unwrap(), b"old");
    let entries: Vec<_> = fs::read_dir(tmp.path()).unwrap().collect();
    assert_eq!(entries.len(), 1);
}

#[test]
fn eval_is_deterministic_and_checks_context() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_dataset(d);
    fs::write(d.join("tiny.toml"), TINY).unwrap();
    ok(d, &["train", "--config", "tiny.toml"]);
    let args = ["eval", "--checkpoint", "runs/tiny/run/checkpoint.json", "--split", "x1/test.jsonl"];
    assert_eq!(ok(d, &args), ok(d, &args));

    let mut bad = args.to_vec();
    bad.extend(["--context-size", "128"]);
    let out = vulnlab(d, &bad);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("context size"));

    let mut bad = args.to_vec();
    bad.extend(["--regime", "ntp"]);
    assert!(!vulnlab(d, &bad).status.success());
}

#[test]
fn untrained_model_scores_near_chance() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["data", "synth", "--out", "c.jsonl", "--seed", "17", "--n-pos", "100"]);
    ok(d, &["data", "build", "--commits", "c.jsonl", "--out", "x1"]);
    let mut all: Vec<FunctionSample> = Vec::new();
    for split in ["train", "validation", "test"] {
        let text = fs::read_to_string(d.join("x1").join(format!("{split}.jsonl"))).unwrap();
        all.extend(text.lines().map(|l| serde_json::from_str::<FunctionSample>(l).unwrap()));
    }
    assert_eq!(all.len(), 200);
    assert_eq!(all.iter().filter(|s| s.label == 1).count(), 100);
    fs::write(d.join("all.jsonl"), samples_to_jsonl(&all).unwrap()).unwrap();

    let config = ModelConfig {
        context_size: 64,
        ..ModelConfig::default()
    };
    LanguageModel::new(config, 123)
        .unwrap()
        .save(&d.join("untrained.json"), Some(Regime::Classification))
        .unwrap();
    let report: vulnlab_cli::EvalReport = serde_json::from_str(&ok(
        d,
        &["eval", "--checkpoint", "untrained.json", "--split", "all.jsonl", "--threshold", "0.5"],
    ))
    .unwrap();
    assert_eq!(report.samples, 200);
    assert!((report.roc_auc - 0.5).abs() <= 0.15, "AUC {}", report.roc_auc);
}

#[test]
fn config_validation_lists_every_problem() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(
        d.join("bad.toml"),
        r#"
name = "bad"
data = "nowhere"
out = "runs/bad"

[model]
n_heads = 3
context_size = 128

[train]
lr_max = -1.0
epochs = 0
"#,
    )
    .unwrap();
    let out = vulnlab(d, &["train", "--config", "bad.toml"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    for needle in ["n_heads", "lr_max", "epochs", "context_size", "train.jsonl", "validation.jsonl", "test.jsonl"] {
        assert!(err.contains(needle), "missing `{needle}` in:\n{err}");
    }
    assert!(!d.join("runs").exists());
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("c.toml"), format!("{TINY}\nbogus = 1\n")).unwrap();
    let out = vulnlab(tmp.path(), &["train", "--config", "c.toml"]);
    assert!(!out.status.success());
}
