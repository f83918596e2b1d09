use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use irc_core::corpus::{read_jsonl, AnswerLabel};
use irc_core::evaluator::{gold_fact_pairs, OfficialPredictions, CNA_ANSWER};

fn irc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_irc")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = irc(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn manifest(output: &Path) -> serde_json::Value {
    let path = PathBuf::from(format!("{}.manifest.json", output.display()));
    serde_json::from_str(&std::fs::read_to_string(&path).expect("manifest written")).unwrap()
}

const TINY: [&str; 16] = [
    "--set", "dim=16", "--set", "layers=1", "--set", "heads=2", "--set", "ff_dim=32",
    "--set", "batch_size=4", "--set", "pretrain_epochs=1", "--set", "ranker_epochs=1", "--set", "e2e_epochs=1",
];

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(irc(&["evaluate", "--bogus"]).status.code(), Some(2));
    assert_eq!(irc(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let out = irc(&["pretrain", "--train", "x", "--out", "y", "--set", "no_such_key=1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn infer_without_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    ok(&["gen-synthetic", "--out", p(&data), "--examples", "4"]);
    let out = irc(&["infer", "--data", p(&data), "--out", p(&dir.path().join("pred.json"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
}

#[test]
fn missing_input_is_a_runtime_error() {
    let out = irc(&["evaluate", "--pred", "/nonexistent/p.json", "--gold", "/nonexistent/g.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gen_synthetic_writes_data_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("train.jsonl");
    ok(&["gen-synthetic", "--out", p(&data), "--examples", "10", "--seed", "3"]);
    let examples = read_jsonl(&data).unwrap();
    assert_eq!(examples.len(), 10);
    assert_eq!(examples.iter().filter(|e| e.gold_answer.label == AnswerLabel::Cna).count(), 3);
    let m = manifest(&data);
    assert_eq!(m["command"], "gen-synthetic");
    assert_eq!(m["seeds"][0], 3);
}

#[test]
fn evaluate_scores_gold_predictions_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let gold = dir.path().join("gold.jsonl");
    ok(&["gen-synthetic", "--out", p(&gold), "--examples", "12"]);
    let examples = read_jsonl(&gold).unwrap();
    let mut preds = OfficialPredictions::default();
    for ex in &examples {
        let answer = match ex.gold_answer.label {
            AnswerLabel::Cna => CNA_ANSWER.to_string(),
            _ => ex.gold_answer.span_text.clone().unwrap(),
        };
        preds.answer.insert(ex.id.clone(), answer);
        preds.sp.insert(ex.id.clone(), gold_fact_pairs(ex).into_iter().collect());
    }
    let pred = dir.path().join("pred.json");
    preds.save(&pred).unwrap();
    let out = ok(&["evaluate", "--pred", p(&pred), "--gold", p(&gold)]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["answer_em"], 100.0);
    assert_eq!(report["sf_f1"], 100.0);
    assert_eq!(report["cna"]["f1"], 100.0);
    assert_eq!(manifest(&PathBuf::from(format!("{}.evaluate", pred.display())))["command"], "evaluate");
}

#[test]
fn full_workflow_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = |name: &str| dir.path().join(name);
    ok(&["gen-synthetic", "--out", p(&d("train.jsonl")), "--examples", "8"]);
    ok(&["gen-synthetic", "--out", p(&d("dev.jsonl")), "--examples", "4", "--split", "dev"]);

    let (train, pre) = (d("train.jsonl"), d("pre.json"));
    let mut args = vec!["pretrain", "--train", p(&train), "--out", p(&pre)];
    args.extend(TINY);
    ok(&args);
    assert!(d("pre.json.log.json").exists());
    assert_eq!(manifest(&d("pre.json"))["config"][0]["batch_size"], 4);

    ok(&["train-e2e", "--checkpoint", p(&d("pre.json")), "--train", p(&d("train.jsonl")), "--out", p(&d("e2e.json"))]);
    let shape_change = irc(&["train-e2e", "--checkpoint", p(&d("pre.json")), "--train", p(&d("train.jsonl")),
        "--out", p(&d("bad.json")), "--set", "dim=32"]);
    assert_eq!(shape_change.status.code(), Some(1));

    for name in ["pred1.json", "pred2.json"] {
        ok(&["infer", "--checkpoint", p(&d("e2e.json")), "--data", p(&d("dev.jsonl")), "--out", p(&d(name))]);
    }
    let first = std::fs::read(d("pred1.json")).unwrap();
    assert_eq!(first, std::fs::read(d("pred2.json")).unwrap());
    let preds = OfficialPredictions::load(d("pred1.json")).unwrap();
    assert_eq!(preds.answer.len(), 4);
    assert_eq!(preds.sp.len(), 4);

    ok(&["evaluate", "--pred", p(&d("pred1.json")), "--gold", p(&d("dev.jsonl")), "--out", p(&d("report.json"))]);
    assert!(d("report.json.manifest.json").exists());

    for param in ["alpha", "beta"] {
        let out = d(&format!("sweep-{param}.json"));
        ok(&["sweep", "--checkpoint", p(&d("e2e.json")), "--data", p(&d("dev.jsonl")), "--param", param,
            "--range", "0:0.9:0.1", "--out", p(&out)]);
        let result: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
        assert_eq!(result["points"].as_array().unwrap().len(), 10);
        assert_eq!(result["param"], param);
    }
}

#[test]
fn sweep_rejects_malformed_range() {
    let out = irc(&["sweep", "--checkpoint", "c", "--data", "d", "--param", "alpha", "--range", "0:0.9", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));
}
