use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn distiller(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_distiller"))
        .current_dir(dir)
        .args(args)
        .env_remove("DISTILLER_ENDPOINT")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = distiller(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("error line");
    serde_json::from_str(line).expect("error is JSON")
}

fn setup(noise: f64) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &[
            "--seed",
            "4",
            "--out-dir",
            "data",
            "synth",
            "--entities",
            "60",
        ],
    );
    let config = json!({
        "seed": 11,
        "ingest": {"dataset": "data/dataset.json", "top_n": 5},
        "selection": {"strategy": "rank_max", "p": 0.3, "n": 0.1},
        "teacher": {"kind": "mock_oracle", "model_id": "oracle", "noise_rate": noise},
        "template": {},
        "distill": {"records": ["sft", "dpo", "pairwise"], "with_explanation": true},
        "eval": {}
    });
    fs::write(dir.path().join("config.json"), config.to_string()).unwrap();
    dir
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = distiller(dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    assert_eq!(err["error"]["stage"], "usage");
    assert!(err["error"]["message"].as_str().unwrap().contains("Usage"));
}

#[test]
fn stage_failure_exits_one_with_json() {
    let dir = setup(0.0);
    let out = distiller(
        dir.path(),
        &[
            "--config",
            "config.json",
            "annotate",
            "--in",
            "missing.jsonl",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_json(&out);
    assert_eq!(err["error"]["stage"], "ingest");
    assert!(err["error"]["message"]
        .as_str()
        .unwrap()
        .contains("missing.jsonl"));
}

#[test]
fn run_without_teacher_names_section() {
    let dir = setup(0.0);
    let mut config: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("config.json")).unwrap()).unwrap();
    config.as_object_mut().unwrap().remove("teacher");
    fs::write(dir.path().join("config.json"), config.to_string()).unwrap();
    let out = distiller(dir.path(), &["--config", "config.json", "run"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_json(&out);
    assert!(err["error"]["message"]
        .as_str()
        .unwrap()
        .contains("teacher"));
}

#[test]
fn score_grpo_reproduces_worked_values() {
    let dir = tempfile::tempdir().unwrap();
    let completions = [
        "The correct answer is [2]",
        "Answer: [2]",
        "The correct answer is [2], since [1] and [4] are of a different brand.",
    ];
    let lines: Vec<String> = completions
        .iter()
        .map(|c| json!({"tuple": "t1", "completion": c, "target": 2, "k": 5}).to_string())
        .collect();
    fs::write(
        dir.path().join("completions.jsonl"),
        lines.join("\n") + "\n",
    )
    .unwrap();
    let stdout = ok(
        dir.path(),
        &[
            "score-grpo",
            "--in",
            "completions.jsonl",
            "--weights",
            "0.333,0.333,0.333",
        ],
    );
    let totals: Vec<f64> = stdout
        .lines()
        .map(|l| {
            serde_json::from_str::<Value>(l).unwrap()["r_total"]
                .as_f64()
                .unwrap()
        })
        .collect();
    for (got, want) in totals.iter().zip([0.706, 0.757, 0.458]) {
        assert!((got - want).abs() < 0.002, "{got} vs {want}");
    }

    ok(
        dir.path(),
        &[
            "score-grpo",
            "--in",
            "completions.jsonl",
            "--out",
            "scores.jsonl",
        ],
    );
    let written = fs::read_to_string(dir.path().join("scores.jsonl")).unwrap();
    assert_eq!(written.lines().count(), 3);
}

#[test]
fn bad_weights_fail() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.jsonl"), "").unwrap();
    let out = distiller(
        dir.path(),
        &["score-grpo", "--in", "c.jsonl", "--weights", "0.5,0.5"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"]["stage"], "score-grpo");
}

#[test]
fn stats_prints_table() {
    let dir = setup(0.0);
    ok(
        dir.path(),
        &["--config", "config.json", "--out-dir", "st", "block"],
    );
    let table = ok(
        dir.path(),
        &["--config", "config.json", "stats", "--in", "st/pool.jsonl"],
    );
    assert!(table.contains("50%") && table.contains("95%"));
    assert!(table.contains("|C_i|"));
    let json = ok(
        dir.path(),
        &[
            "--config",
            "config.json",
            "stats",
            "--in",
            "st/pool.jsonl",
            "--format",
            "json",
        ],
    );
    let stats: Value = serde_json::from_str(&json).unwrap();
    assert_eq!(stats["tuple_count"], 60);
}

fn manifest(dir: &Path, out: &str) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join(out).join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn run_is_deterministic() {
    let dir = setup(0.2);
    ok(
        dir.path(),
        &["--config", "config.json", "--out-dir", "a", "run"],
    );
    ok(
        dir.path(),
        &["--config", "config.json", "--out-dir", "b", "run"],
    );
    let (a, b) = (manifest(dir.path(), "a"), manifest(dir.path(), "b"));
    assert_eq!(a["outputs"], b["outputs"]);
    assert!(a["outputs"].as_object().unwrap().contains_key("sft.jsonl"));

    ok(
        dir.path(),
        &[
            "--config",
            "config.json",
            "--out-dir",
            "c",
            "--seed",
            "99",
            "run",
        ],
    );
    let c = manifest(dir.path(), "c");
    assert_eq!(c["master_seed"], 99);
    assert_ne!(
        a["outputs"]["knowledge.jsonl"],
        c["outputs"]["knowledge.jsonl"]
    );
}

#[test]
fn run_matches_stage_by_stage() {
    let dir = setup(0.2);
    ok(
        dir.path(),
        &["--config", "config.json", "--out-dir", "run", "run"],
    );
    let c = ["--config", "config.json", "--out-dir", "st"];
    let stage = |args: &[&str]| {
        let mut all: Vec<&str> = c.to_vec();
        all.extend_from_slice(args);
        ok(dir.path(), &all)
    };
    stage(&["block"]);
    stage(&["select-data", "--in", "st/pool.jsonl"]);
    stage(&["annotate", "--in", "st/training.jsonl"]);
    let kn = [
        "--in",
        "st/training.jsonl",
        "--knowledge",
        "st/knowledge.jsonl",
    ];
    stage(&[&["build-sft"][..], &kn, &["--job"]].concat());
    stage(&[&["build-dpo"][..], &kn, &["--job"]].concat());
    stage(&[&["build-pairwise"][..], &kn].concat());
    stage(&[&["evaluate"][..], &kn, &["--out", "st/eval.json"]].concat());

    let outputs = manifest(dir.path(), "run")["outputs"].clone();
    let mut compared = 0;
    for name in outputs.as_object().unwrap().keys() {
        if name == "stats.json" {
            continue;
        }
        let a = fs::read(dir.path().join("run").join(name)).unwrap();
        let b = fs::read(dir.path().join("st").join(name))
            .unwrap_or_else(|_| panic!("stage-by-stage run has no {name}"));
        assert!(a == b, "{name} differs");
        compared += 1;
    }
    assert!(compared >= 9);
}

#[test]
fn disambiguate_umc_from_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let preds = [
        json!({"query": "a1", "candidate": "b1", "label": 1, "score": 0.9}),
        json!({"query": "a1", "candidate": "b2", "label": 1, "score": 0.8}),
        json!({"query": "a2", "candidate": "b1", "label": 1, "score": 0.85}),
        json!({"query": "a2", "candidate": "b3", "label": 0, "score": 0.7}),
    ];
    let text: String = preds.iter().map(|p| p.to_string() + "\n").collect();
    fs::write(dir.path().join("preds.jsonl"), text).unwrap();
    ok(
        dir.path(),
        &[
            "disambiguate",
            "--strategy",
            "umc",
            "--predictions",
            "preds.jsonl",
            "--out",
            "kept.jsonl",
        ],
    );
    let kept: Vec<Value> = fs::read_to_string(dir.path().join("kept.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let pairs: Vec<(&str, &str)> = kept
        .iter()
        .map(|v| {
            (
                v["query"].as_str().unwrap(),
                v["candidate"].as_str().unwrap(),
            )
        })
        .collect();
    assert_eq!(pairs, vec![("a1", "b1")]);
}

#[test]
fn load_summarizes_dataset() {
    let dir = setup(0.0);
    let out = ok(dir.path(), &["load", "--dataset", "data/dataset.json"]);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["entity_count_per_source"], json!([60, 60]));
    assert!(v["match_count"].as_u64().unwrap() > 0);
}

#[test]
fn evaluate_table_and_csv() {
    let dir = setup(0.0);
    ok(
        dir.path(),
        &["--config", "config.json", "--out-dir", "r", "run"],
    );
    let args = [
        "--config",
        "config.json",
        "evaluate",
        "--in",
        "r/training.jsonl",
        "--knowledge",
        "r/knowledge.jsonl",
        "--format",
        "table",
        "--csv",
        "tradeoff.csv",
        "--label",
        "oracle",
        "--seconds",
        "1.5",
    ];
    let table = ok(dir.path(), &args);
    assert!(table.contains("precision") && table.contains("1.0000"));
    ok(dir.path(), &args);
    let csv = fs::read_to_string(dir.path().join("tradeoff.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}
