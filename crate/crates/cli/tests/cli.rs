use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn protomatch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_protomatch"))
        .args(args)
        .env_remove("PROTO_OOD_SEED_OVERRIDE")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn synth(dir: &Path, extra: &[&str]) -> String {
    let out = dir.to_str().unwrap();
    let mut args = vec!["synth", "--out", out];
    args.extend_from_slice(extra);
    ok(&protomatch(&args));
    dir.join("manifest.json").to_str().unwrap().to_string()
}

fn lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().map(str::to_string).collect()
}

#[test]
fn synth_counts_and_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let args = ["--k-id", "8", "--k-ood", "8", "--per-class", "40", "--seed", "1"];
    synth(&a, &args);
    synth(&b, &args);
    assert_eq!(lines(&a.join("train.jsonl")).len(), 8 * 40);
    for f in ["manifest.json", "train.jsonl", "val.jsonl", "test.jsonl"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn infeasible_vocabulary_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = protomatch(&["synth", "--out", tmp.path().to_str().unwrap(), "--vocab-size", "5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("vocab_size"));
}

#[test]
fn error_classes_map_to_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing.json");
    let out = protomatch(&["train", "--manifest", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(5));

    let bad = tmp.path().join("bad.json");
    fs::write(&bad, "{\"scenario\": 3}").unwrap();
    let out = protomatch(&["train", "--manifest", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));

    let manifest = synth(&tmp.path().join("c"), &[]);
    let out = protomatch(&["train", "--manifest", &manifest, "--tau", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_then_eval_reproduces_the_metrics_row() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(&tmp.path().join("c"), &["--per-class", "10"]);
    let runs = tmp.path().join("runs");
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"train": {"epochs": 3, "lr": 0.5}}"#).unwrap();
    ok(&protomatch(&[
        "train", "--config", cfg.to_str().unwrap(), "--manifest", &manifest, "--lr", "0.001",
        "--method", "semantic-matching", "--shots", "5", "--seed", "2", "--variant", "name-only",
        "--lambda", "0", "--out", runs.to_str().unwrap(),
    ]));
    let dir = runs.join("semantic-matching-name-only-lambda0-5shot-seed2");
    for f in ["config.json", "train_log.jsonl", "scores.jsonl", "metrics.csv", "roc.svg", "pr.svg", "scores_hist.svg"] {
        assert!(dir.join(f).exists(), "{f}");
    }
    let resolved: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(resolved["train"]["lr"], 0.001, "flag beats file");
    assert_eq!(resolved["train"]["epochs"], 3, "file beats default");
    assert_eq!(lines(&dir.join("train_log.jsonl")).len(), 1 + 3);

    let ckpt = dir.join("semantic-matching-name-only-lambda0-5shot-seed2.best.ckpt");
    let eval_dir = tmp.path().join("eval");
    let stdout = ok(&protomatch(&[
        "eval", "--checkpoint", ckpt.to_str().unwrap(), "--manifest", &manifest, "--out", eval_dir.to_str().unwrap(),
    ]));
    let trained_row = lines(&dir.join("metrics.csv"))[1].clone();
    assert!(stdout.lines().any(|l| l == trained_row), "{stdout}");
    assert_eq!(fs::read(dir.join("scores.jsonl")).unwrap(), fs::read(eval_dir.join("scores.jsonl")).unwrap());
}

#[test]
fn grid_writes_seed_rows_and_exact_means() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(&tmp.path().join("c"), &["--per-class", "10"]);
    let out = tmp.path().join("grid");
    ok(&protomatch(&[
        "grid", "--manifest", &manifest, "--method", "discriminative", "--seeds", "1,2,3",
        "--epochs", "2", "--parallel", "2", "--out", out.to_str().unwrap(),
    ]));
    let rows = lines(&out.join("report.csv"));
    assert_eq!(rows.len(), 1 + 3 + 1);
    let field = |row: &str, i: usize| row.split(',').nth(i).unwrap().parse::<f64>().unwrap();
    for col in 3..7 {
        let mean = (1..4).map(|r| field(&rows[r], col)).sum::<f64>() / 3.0;
        assert!((field(&rows[4], col) - mean).abs() <= 1e-12);
    }
    assert!(rows[4].starts_with("5,discriminative,mean,"));
    assert!(out.join("report.json").exists() && out.join("val_acc.svg").exists());
}

#[test]
fn seed_override_replaces_the_seed_list() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(&tmp.path().join("c"), &["--per-class", "10"]);
    let out = tmp.path().join("grid");
    let status = Command::new(env!("CARGO_BIN_EXE_protomatch"))
        .args(["grid", "--manifest", &manifest, "--method", "discriminative", "--epochs", "1"])
        .args(["--out", out.to_str().unwrap()])
        .env("PROTO_OOD_SEED_OVERRIDE", "7")
        .output()
        .unwrap();
    ok(&status);
    assert!(out.join("discriminative-5shot-seed7").exists());
    assert_eq!(lines(&out.join("report.csv")).len(), 1 + 1 + 1);
}

#[test]
fn gradcheck_passes() {
    let stdout = ok(&protomatch(&["gradcheck", "--instances", "2"]));
    assert!(stdout.contains("encoder") && !stdout.contains("FAILED"));
}
