use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use openspan::synth::synth_corpus;
use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_openspan"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_corpus(dir: &Path, name: &str, n: usize, seed: u64) -> PathBuf {
    let path = dir.join(format!("{name}.jsonl"));
    let lines: Vec<String> = synth_corpus(n, seed)
        .iter()
        .map(|e| serde_json::to_string(e).unwrap())
        .collect();
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    path
}

fn write_config(dir: &Path, steps: u64) -> PathBuf {
    let d = dir.display();
    let cfg = format!(
        r#"out = "{d}/run"

[data]
train = ["{d}/train.jsonl"]
val = ["{d}/val.jsonl"]
test = ["{d}/test.jsonl"]

[tokenizer.by_language]
zz = "char_ngram:2"

[model]
architecture = "bi"
vocab_size = 128
d_model = 8
d_mlp = 8
d_width = 4
max_span_len = 4
max_seq_len = 64

[train]
batch_size = 4
max_steps = {steps}
learning_rate = 0.003
seed = 5

[train.early_stopping]
enabled = false
eval_every = 2
"#
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, cfg).unwrap();
    path
}

fn setup(steps: u64) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), "train", 12, 1);
    write_corpus(dir.path(), "val", 6, 2);
    write_corpus(dir.path(), "test", 6, 3);
    let cfg = write_config(dir.path(), steps);
    (dir, cfg)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_lists_every_flag() {
    let o = run(&["train", "--help"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    for flag in [
        "--config",
        "--data",
        "--out",
        "--thresholds",
        "--format",
        "--seed",
        "--tokenizer",
        "--max-span-len",
        "--mask-word-boundaries",
    ] {
        assert!(text.contains(flag), "{flag} missing from help");
    }
    let o = run(&["evaluate", "--help"]);
    assert!(stdout(&o).contains("--checkpoint"));
    let o = run(&["--help"]);
    for cmd in ["train", "evaluate", "sweep", "stats", "validate-data"] {
        assert!(stdout(&o).contains(cmd));
    }
}

#[test]
fn unknown_flags_fail_with_usage_code() {
    assert_eq!(code(&run(&["train", "--no-such-flag"])), 2);
    assert_eq!(code(&run(&["frobnicate"])), 2);
}

#[test]
fn missing_data_path_names_the_field() {
    let (dir, cfg) = setup(1);
    std::fs::remove_file(dir.path().join("val.jsonl")).unwrap();
    let o = run(&["train", "--config", s(&cfg)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("data.val"), "{}", stderr(&o));
}

#[test]
fn bad_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nbatch = 3\n").unwrap();
    let o = run(&["train", "--config", s(&cfg)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("batch"));
}

#[test]
fn zero_steps_writes_the_initial_checkpoint() {
    let (dir, cfg) = setup(0);
    let o = run(&["train", "--config", s(&cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let run_dir = dir.path().join("run");
    let ckpt: Value = serde_json::from_str(&std::fs::read_to_string(run_dir.join("checkpoint.json")).unwrap()).unwrap();
    assert_eq!(ckpt["step"], 0);
    assert_eq!(std::fs::read_to_string(run_dir.join("metrics.jsonl")).unwrap(), "");
    assert!(run_dir.join("report.json").is_file());
}

#[test]
fn training_outputs_are_complete_and_reproducible() {
    let (dir, cfg) = setup(6);
    let run_dir = dir.path().join("run");
    let o = run(&["train", "--config", s(&cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let metrics = std::fs::read_to_string(run_dir.join("metrics.jsonl")).unwrap();
    // 6 steps plus a validation every 2 steps
    assert_eq!(metrics.lines().count(), 6 + 3);
    for line in metrics.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["seed"], 5);
    }
    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 5);
    assert_eq!(report["split"], "test");
    assert_eq!(report["macro_f1"].as_object().unwrap().len(), 7);

    let read = |name: &str| std::fs::read(run_dir.join(name)).unwrap();
    let first: Vec<Vec<u8>> = ["checkpoint.json", "metrics.jsonl", "report.json"].map(read).to_vec();
    let o = run(&["train", "--config", s(&cfg)]);
    assert_eq!(code(&o), 0);
    let second: Vec<Vec<u8>> = ["checkpoint.json", "metrics.jsonl", "report.json"].map(read).to_vec();
    assert_eq!(first, second);

    // a different seed from the flag changes the run
    let o = run(&["train", "--config", s(&cfg), "--seed", "6"]);
    assert_eq!(code(&o), 0);
    assert_ne!(read("checkpoint.json"), first[0]);
}

#[test]
fn evaluate_and_sweep() {
    let (dir, cfg) = setup(3);
    assert_eq!(code(&run(&["train", "--config", s(&cfg)])), 0);
    let ckpt = dir.path().join("run/checkpoint.json");
    let test = dir.path().join("test.jsonl");

    let args = ["evaluate", "--checkpoint", s(&ckpt), "--data", s(&test)];
    let a = run(&args);
    let b = run(&args);
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    let v: Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(v["macro_f1"].as_object().unwrap().keys().collect::<Vec<_>>(), ["0.5"]);

    let o = run(&["sweep", "--checkpoint", s(&ckpt), "--data", s(&test)]);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    let keys: Vec<&String> = v["macro_f1"].as_object().unwrap().keys().collect();
    assert_eq!(keys.len(), 7);
    assert!(v["best_per_language_macro_f1"].is_number());

    let o = run(&["sweep", "--checkpoint", s(&ckpt), "--data", s(&test), "--format", "table"]);
    let table = stdout(&o);
    let rows = table.lines().filter(|l| l.starts_with("test ")).count();
    assert_eq!(rows, 7, "{table}");

    let out = dir.path().join("reports/eval.json");
    let o = run(&["evaluate", "--checkpoint", s(&ckpt), "--data", s(&test), "--thresholds", "0.2,0.4", "--out", s(&out)]);
    assert_eq!(code(&o), 0);
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["macro_f1"].as_object().unwrap().len(), 2);
}

#[test]
fn incompatible_checkpoints_are_rejected() {
    let (dir, cfg) = setup(1);
    assert_eq!(code(&run(&["train", "--config", s(&cfg)])), 0);
    let ckpt = dir.path().join("run/checkpoint.json");
    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(&ckpt).unwrap()).unwrap();
    v["train_config"]["learning_rate"] = serde_json::json!(0.5);
    let tampered = dir.path().join("tampered.json");
    std::fs::write(&tampered, v.to_string()).unwrap();
    let test = dir.path().join("test.jsonl");
    let o = run(&["evaluate", "--checkpoint", s(&tampered), "--data", s(&test)]);
    assert_eq!(code(&o), 2);
    let o = run(&["evaluate", "--checkpoint", s(&dir.path().join("none.json")), "--data", s(&test)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn stats_reports_the_single_example_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("one.jsonl");
    std::fs::write(
        &path,
        r#"{"text": "a b c d e", "entities": [{"start": 2, "end": 5, "label": "x"}], "language": "en"}"#,
    )
    .unwrap();
    let o = run(&["stats", "--data", s(&path), "--max-span-len", "30"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    let row = &v["ratios"][0];
    assert_eq!((row["positives"].as_u64(), row["negatives"].as_u64()), (Some(1), Some(14)));
    assert_eq!(row["ratio"].as_f64(), Some(1.0 / 14.0));
    assert!(v["coverage"][0]["fraction"].as_f64().unwrap() > 0.0);
}

#[test]
fn stats_masking_never_lowers_the_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_corpus(dir.path(), "c", 30, 4);
    let o = run(&[
        "stats",
        "--data",
        s(&path),
        "--tokenizer",
        "whitespace",
        "--tokenizer",
        "char_ngram:2",
        "--mask-word-boundaries",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    let rows = v["ratios"].as_array().unwrap();
    assert_eq!(rows.len(), 2 * 2 * 2);
    for r in rows.iter().filter(|r| r["masked"] == true) {
        let off = rows
            .iter()
            .find(|o| o["masked"] == false && o["language"] == r["language"] && o["tokenizer"] == r["tokenizer"])
            .unwrap();
        let ratio = |v: &Value| v["ratio"].as_f64().unwrap_or(f64::INFINITY);
        assert!(ratio(r) >= ratio(off));
    }
}

#[test]
fn stats_on_an_empty_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.jsonl");
    std::fs::write(&path, "").unwrap();
    let o = run(&["stats", "--data", s(&path)]);
    assert_eq!(code(&o), 0);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["ratios"], serde_json::json!([]));
    assert_eq!(v["coverage"], serde_json::json!([]));
}

#[test]
fn validate_data_flags_bad_records() {
    let dir = tempfile::tempdir().unwrap();
    let good = write_corpus(dir.path(), "good", 4, 1);
    let o = run(&["validate-data", "--data", s(&good)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["files"][0]["records"], 4);

    let bad = dir.path().join("bad.jsonl");
    std::fs::write(
        &bad,
        r#"{"text": "ab", "entities": [{"start": 1, "end": 9, "label": "x"}], "language": "en"}"#,
    )
    .unwrap();
    let o = run(&["validate-data", "--data", s(&good), s(&bad)]);
    assert_eq!(code(&o), 2);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["ok"], false);
    assert_eq!(v["files"][0]["ok"], true);
    assert!(v["files"][1]["error"].as_str().unwrap().contains("bad.jsonl:1"));
}
