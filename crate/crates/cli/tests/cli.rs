use std::path::Path;

use facescale::emb::{read_emb, write_emb};
use facescale::{EmbeddingDataset, Matrix};
use facescale_cli::run_cli_with;
use serde_json::Value;

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("facescale").chain(args.iter().copied());
    let code = run_cli_with(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn cost_reports_the_reference_configuration() {
    let (code, out, _) = run(&["cost", "--ids", "2000000", "--dim", "512", "--gpus", "1", "--batch", "64"]);
    assert_eq!(code, 0);
    assert!(out.contains("12.40 GiB"), "{out}");
    assert!(out.contains("13312000000"));
    let (code, out, _) = run(&["cost", "--ids", "2000000", "--dim", "512", "--gpus", "32", "--batch", "64", "--format", "json"]);
    assert_eq!(code, 0);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["mem_fc_bytes"], 1_408_000_000u64);
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(run(&["cost", "--bogus"]).0, 2);
    assert_eq!(run(&["frobnicate"]).0, 2);
    assert_eq!(run(&[]).0, 2);
    assert_eq!(run(&["cost", "--dim", "8"]).0, 2);
    assert_eq!(run(&["cost", "--ids", "4", "--dim", "8", "--gpus", "5"]).0, 2);
    assert_eq!(run(&["search", "--controller", "annealing", "--target", "1e6"]).0, 2);
    let (code, out, _) = run(&["--help"]);
    assert_eq!(code, 0);
    assert!(out.contains("finetune"));
}

#[test]
fn unknown_config_keys_are_usage_errors_with_schema_help() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[train]\nlearning_rate = 0.1\n").unwrap();
    let (code, _, err) = run(&["cost", "--ids", "10", "--dim", "4", "--config", p(&cfg)]);
    assert_eq!(code, 2);
    assert!(err.contains("learning_rate"), "{err}");
    assert!(err.contains("[cleaning]"), "{err}");
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.emb");
    assert_eq!(run(&["clean", "--input", p(&missing)]).0, 1);
    let bad = dir.path().join("bad.emb");
    std::fs::write(&bad, b"EMB1\x01\x00garbage").unwrap();
    let (code, _, err) = run(&["clean", "--input", p(&bad)]);
    assert_eq!(code, 1);
    assert!(err.contains("truncated"), "{err}");
}

#[test]
fn cleaning_a_clean_dataset_removes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("clean.emb");
    let (code, _, _) = run(&["synth", "--ids", "20", "--per-id", "10", "--sigma", "0.05", "--out", p(&data)]);
    assert_eq!(code, 0);
    let (code, out, _) = run(&["clean", "--input", p(&data)]);
    assert_eq!(code, 0);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["samples_kept"], 200);
    assert_eq!(v["report"]["rounds"][0]["removed"].as_array().unwrap().len(), 0);
    assert_eq!(v["report"]["converged"], true);
}

#[test]
fn planted_noise_is_found_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let (data, truth, out) = (dir.path().join("n.emb"), dir.path().join("t.json"), dir.path().join("c.emb"));
    assert_eq!(run(&["synth", "--preset", "cleaning", "--seed", "3", "--out", p(&data), "--truth", p(&truth)]).0, 0);
    let (code, report, _) = run(&["clean", "--input", p(&data), "--truth", p(&truth), "--out", p(&out)]);
    assert_eq!(code, 0);
    let v: Value = serde_json::from_str(&report).unwrap();
    assert!(v["metrics"]["outlier_recall"].as_f64().unwrap() >= 0.95);
    let cleaned: EmbeddingDataset<f32> = read_emb(&out).unwrap();
    assert_eq!(cleaned.n() as u64, v["samples_kept"].as_u64().unwrap());
}

#[test]
fn outputs_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.emb"), dir.path().join("b.emb"));
    run(&["synth", "--seed", "7", "--ids", "5", "--per-id", "4", "--out", p(&a)]);
    run(&["synth", "--seed", "7", "--ids", "5", "--per-id", "4", "--out", p(&b)]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    run(&["synth", "--seed", "8", "--ids", "5", "--per-id", "4", "--out", p(&b)]);
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let search = ["search", "--target", "2e7", "--budget", "60", "--seed", "5"];
    let (code, first, _) = run(&search);
    assert_eq!(code, 0);
    assert_eq!(run(&search).1, first);
    let best: Value = serde_json::from_str(&first).unwrap();
    assert!(best["reward"].as_f64().unwrap() > 0.0);
    // `toy` names the built-in space
    let named = ["search", "--space", "toy", "--target", "2e7", "--budget", "60", "--seed", "5"];
    assert_eq!(run(&named).1, first);
}

#[test]
fn exhaustive_search_writes_every_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let history = dir.path().join("h.jsonl");
    let (code, _, _) = run(&["search", "--controller", "exhaustive", "--budget", "756", "--target", "5e7", "--history", p(&history)]);
    assert_eq!(code, 0);
    let text = std::fs::read_to_string(&history).unwrap();
    assert_eq!(text.lines().count(), 756);
    for line in text.lines().take(3) {
        let v: Value = serde_json::from_str(line).unwrap();
        assert!(v["arch"]["stages"].is_array());
    }
}

#[test]
fn train_finetune_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = |n: &str| dir.path().join(n);
    let cfg = d("run.toml");
    std::fs::write(
        &cfg,
        "[train]\nhidden_dim = 32\nembed_dim = 16\nglobal_batch = 16\ntotal_epochs = 4\ndecay_epochs = [3]\n",
    )
    .unwrap();
    let args = ["synth", "--preset", "training", "--ids", "10", "--per-id", "12", "--dim", "24", "--pair-count", "100"];
    let (data, pairs) = (d("train.emb"), d("pairs.json"));
    let mut argv = args.to_vec();
    argv.extend(["--out", p(&data), "--pairs", p(&pairs)]);
    assert_eq!(run(&argv).0, 0);

    let (code, metrics, err) = run(&["train", "--config", p(&cfg), "--data", p(&d("train.emb")), "--out", p(&d("m.ck"))]);
    assert_eq!(code, 0, "{err}");
    let epochs: Vec<Value> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(epochs.len(), 4);
    assert_eq!(epochs[3]["epoch"], 3);

    let (code, eval, _) = run(&["eval", "--model", p(&d("m.ck")), "--pairs", p(&d("pairs.json"))]);
    assert_eq!(code, 0);
    let v: Value = serde_json::from_str(&eval).unwrap();
    assert!(v["overall"]["accuracy"].as_f64().unwrap() > 0.5);
    assert_eq!(v["masked"]["pairs"], 100);

    let (code, ft, _) = run(&[
        "finetune", "--model", p(&d("m.ck")), "--data", p(&d("train.emb")), "--out", p(&d("f.ck")),
        "--pairs", p(&d("pairs.json")), "--epochs", "1",
    ]);
    assert_eq!(code, 0);
    let v: Value = serde_json::from_str(&ft).unwrap();
    assert_eq!(v["config"]["mask_ratio"], 0.33);
    assert_eq!(v["epochs"]["epochs"].as_array().unwrap().len(), 1);
    assert!(d("f.ck").exists());

    let (code, again, _) = run(&["train", "--config", p(&cfg), "--data", p(&d("train.emb")), "--out", p(&d("m2.ck"))]);
    assert_eq!(code, 0);
    assert_eq!(again, metrics);
    assert_eq!(std::fs::read(d("m.ck")).unwrap(), std::fs::read(d("m2.ck")).unwrap());
}

#[test]
fn emb_written_by_the_library_is_read_by_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tiny.emb");
    let f = Matrix::from_rows(&[vec![1.0f32, 0.0], vec![0.0, 1.0], vec![0.6, 0.8], vec![0.8, 0.6]]).unwrap();
    write_emb(&EmbeddingDataset::new(f, vec![0, 1, 0, 1], 2).unwrap(), &path).unwrap();
    let (code, out, _) = run(&["clean", "--input", p(&path), "--min-class-size", "1"]);
    assert_eq!(code, 0);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["config"]["min_class_size"], 1);
}
