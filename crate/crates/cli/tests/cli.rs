use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

const BIN: &str = env!("CARGO_BIN_EXE_qdnn-lab");

/// Small dataset and model flags so each command finishes quickly.
const TINY_DATA: &[&str] = &["--rings", "1", "--points", "24", "--subsamples", "3", "--density", "20"];

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .arg("--out-dir")
        .arg(dir)
        .args(args)
        .env("QDNN_LAB_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn sha(path: &Path) -> String {
    hex::encode(Sha256::digest(fs::read(path).unwrap()))
}

fn with(base: &[&str], extra: &[&str]) -> Vec<String> {
    base.iter().chain(extra).map(|s| s.to_string()).collect()
}

fn args(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

fn train_tiny(dir: &Path) {
    let a = with(
        &["train", "--width", "8", "--depth", "3", "--epochs", "3", "--batch-size", "16"],
        TINY_DATA,
    );
    ok(dir, &args(&a));
}

#[test]
fn gen_data_reports_counts_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["gen-data"]);
    assert!(out.contains("core=2000 total=20000"), "{out}");
    let csv = dir.path().join("data/train.csv");
    let first = sha(&csv);
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("x,y,label\n"));
    assert!(dir.path().join("data/train.json").exists());

    ok(dir.path(), &["gen-data"]);
    assert_eq!(sha(&csv), first);

    let out = ok(dir.path(), &["gen-data", "--rings", "1", "--output", "one.csv"]);
    assert!(out.contains("core=400"), "{out}");
    assert!(!dir.path().join("one.tmp.csv").exists());
}

#[test]
fn bad_dataset_spec_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["gen-data", "--rings", "0"]);
    assert!(!out.status.success());
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn train_then_retrain_records_quant_metadata() {
    let dir = tempfile::tempdir().unwrap();
    train_tiny(dir.path());
    let log = fs::read_to_string(dir.path().join("logs/train.csv")).unwrap();
    assert!(log.starts_with("epoch,iteration,lr,train_loss,eval_accuracy,lip_loss\n"));
    assert_eq!(log.lines().count(), 4);

    let a = with(
        &["retrain", "--checkpoint", "checkpoints/float.json", "--wbits", "2", "--epochs", "2"],
        TINY_DATA,
    );
    ok(dir.path(), &args(&a));
    let ck: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("checkpoints/quant.json")).unwrap()).unwrap();
    assert_eq!(ck["quant"]["weight_bits"], 2);
    assert_eq!(ck["quant"]["delta"].as_array().unwrap().len(), 3);
    assert!(ck["quant"]["delta"][0].as_f64().unwrap() > 0.0);
}

#[test]
fn lip_retraining_logs_the_regularizer() {
    let dir = tempfile::tempdir().unwrap();
    train_tiny(dir.path());
    let a = with(
        &[
            "retrain", "--checkpoint", "checkpoints/float.json", "--wbits", "2", "--abits", "2", "--lip", "1e-4",
            "--epochs", "1",
        ],
        TINY_DATA,
    );
    ok(dir.path(), &args(&a));
    let log = fs::read_to_string(dir.path().join("logs/retrain.csv")).unwrap();
    let row: Vec<&str> = log.lines().nth(1).unwrap().split(',').collect();
    assert!(row[5].parse::<f64>().unwrap() > 0.0, "{log}");
}

#[test]
fn finetune_runs_whole_cycles() {
    let dir = tempfile::tempdir().unwrap();
    train_tiny(dir.path());
    let a = with(
        &["retrain", "--checkpoint", "checkpoints/float.json", "--wbits", "2", "--epochs", "1"],
        TINY_DATA,
    );
    ok(dir.path(), &args(&a));
    let a = with(
        &[
            "finetune", "--checkpoint", "checkpoints/quant.json", "--clr-cycle", "2-epochs", "--cycles", "3",
            "--batch-size", "16",
        ],
        TINY_DATA,
    );
    ok(dir.path(), &args(&a));
    let log = fs::read_to_string(dir.path().join("logs/finetune.csv")).unwrap();
    let rows: Vec<&str> = log.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    // 24 points * 2 halves * 2 labels * (1 + 3) samples = 384; 24 batches per epoch.
    let last_iter: usize = rows[2].split(',').nth(1).unwrap().parse().unwrap();
    assert_eq!(last_iter, 3 * 2 * 24);
}

#[test]
fn eval_is_exact_on_rerun_and_appends_rows() {
    let dir = tempfile::tempdir().unwrap();
    train_tiny(dir.path());
    let a = with(&["eval", "--checkpoint", "checkpoints/float.json"], TINY_DATA);
    let first = ok(dir.path(), &args(&a));
    let second = ok(dir.path(), &args(&a));
    assert_eq!(first, second);
    let report = fs::read_to_string(dir.path().join("reports/accuracy.csv")).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines[0], "model,width,depth,residual,n_W,n_A,accuracy_pct,seed");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("8-3,8,3,false,float,float,"));
}

#[test]
fn map_writes_ppm_files() {
    let dir = tempfile::tempdir().unwrap();
    train_tiny(dir.path());
    ok(
        dir.path(),
        &[
            "map", "--checkpoint", "checkpoints/float.json", "--window", "-1.1", "1.1", "-1.1", "1.1", "--res", "41",
            "--output", "full.ppm",
        ],
    );
    let bytes = fs::read(dir.path().join("full.ppm")).unwrap();
    let header = b"P6\n41 41\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    assert_eq!(bytes.len(), header.len() + 3 * 41 * 41);

    ok(
        dir.path(),
        &["map", "--checkpoint", "checkpoints/float.json", "--quarter", "--res", "21", "--output", "q.ppm"],
    );
    ok(
        dir.path(),
        &["map", "--checkpoint", "checkpoints/float.json", "--quarter", "--res", "21", "--output", "q2.ppm"],
    );
    assert_eq!(sha(&dir.path().join("q.ppm")), sha(&dir.path().join("q2.ppm")));
}

#[test]
fn missing_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in [
        vec!["eval", "--checkpoint", "nope.json"],
        vec!["map", "--checkpoint", "nope.json"],
        vec!["retrain", "--checkpoint", "nope.json", "--wbits", "2"],
        vec!["train", "--data", "missing.csv"],
    ] {
        let out = run(dir.path(), &cmd);
        assert!(!out.status.success(), "{cmd:?}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("nope.json") || cmd[0] == "train");
    }
    let out = run(dir.path(), &["reproduce", "fig9"]);
    assert!(!out.status.success());
}

#[test]
fn config_file_sits_between_flags_and_defaults() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("cfg.json"),
        r#"{"model": {"width": 6, "depth": 3}, "pretrain": {"epochs": 1, "batch_size": 32},
            "dataset": {"rings": 1, "points": 16, "subsamples": 1}, "eval": {"density": 15}}"#,
    )
    .unwrap();
    let width = |dir: &Path| -> u64 {
        let ck: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.join("checkpoints/float.json")).unwrap()).unwrap();
        ck["architecture"]["width"].as_u64().unwrap()
    };
    ok(dir.path(), &["--config", "cfg.json", "train"]);
    assert_eq!(width(dir.path()), 6);
    ok(dir.path(), &["--config", "cfg.json", "train", "--width", "5"]);
    assert_eq!(width(dir.path()), 5);

    fs::write(dir.path().join("bad.json"), r#"{"model": {"wdth": 6}}"#).unwrap();
    assert!(!run(dir.path(), &["--config", "bad.json", "train"]).status.success());
}

#[test]
fn gen_data_output_feeds_training() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen-data", "--rings", "1", "--points", "16", "--subsamples", "1"]);
    ok(
        dir.path(),
        &[
            "train", "--data", "data/train.csv", "--width", "4", "--depth", "2", "--epochs", "1", "--density", "10",
        ],
    );
    assert!(dir.path().join("checkpoints/float.json").exists());
}

#[test]
fn reproduce_is_independent_of_thread_count() {
    let tiny = [
        "reproduce", "fig1", "--pretrain-epochs", "1", "--res", "17", "--rings", "1", "--points", "16", "--subsamples",
        "1", "--density", "10",
    ];
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(a.path(), &tiny);
    let out = Command::new(BIN)
        .arg("--out-dir")
        .arg(b.path())
        .args(tiny)
        .env("QDNN_LAB_THREADS", "3")
        .output()
        .unwrap();
    assert!(out.status.success());
    for f in ["fig1/summary.csv", "fig1/maps/dataset.ppm", "fig1/maps/128-4_s0.ppm", "fig1/maps/256-3_s0.ppm"] {
        assert_eq!(sha(&a.path().join(f)), sha(&b.path().join(f)), "{f}");
    }
    let summary = fs::read_to_string(a.path().join("fig1/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 4);
}
