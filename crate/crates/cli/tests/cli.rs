use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn segmatch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segmatch"))
        .args(args)
        .env_remove("SEGMATCH_OUTPUT_ROOT")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn segmatch")
}

fn ok(args: &[&str]) -> Output {
    let out = segmatch(args);
    assert!(
        out.status.success(),
        "segmatch {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

/// A small dataset with splits, for train and eval tests.
fn small_dataset(root: &Path) -> PathBuf {
    let data = root.join("data");
    ok(&["synth", "--out", p(&data), "--items", "12", "--size", "16", "--seed", "5"]);
    ok(&["split", "--data", p(&data), "--n-labeled", "4", "--seed", "1"]);
    data
}

fn train(data: &Path, out: &Path, extra: &[&str]) -> String {
    let mut args = vec![
        "train",
        "--data",
        p(data),
        "--out",
        p(out),
        "--epochs",
        "1",
        "--train-size",
        "16",
        "--batch-l",
        "2",
        "--batch-u",
        "2",
        "--max-steps",
        "3",
    ];
    args.extend_from_slice(extra);
    ok(&args);
    std::fs::read_to_string(out.join("metrics.jsonl")).unwrap()
}

#[test]
fn synth_writes_the_requested_items_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["synth", "--out", p(d), "--items", "10", "--size", "24", "--seed", "9"]);
    }
    let (ia, ib) = (files(&a.join("images")), files(&b.join("images")));
    assert_eq!(ia.len(), 10);
    assert_eq!(files(&a.join("masks")).len(), 10);
    for (x, y) in ia.iter().zip(&ib) {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
    }
    let index: Value = serde_json::from_str(&std::fs::read_to_string(a.join("index.json")).unwrap()).unwrap();
    assert_eq!(index["num_classes"], 3);
}

#[test]
fn synth_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    assert_eq!(segmatch(&["synth", "--out", p(&out), "--classes", "1"]).status.code(), Some(1));
    ok(&["synth", "--out", p(&out), "--items", "2", "--size", "16"]);
    let again = segmatch(&["synth", "--out", p(&out), "--items", "2", "--size", "16"]);
    assert_eq!(again.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--overwrite"));
    ok(&["synth", "--out", p(&out), "--items", "3", "--size", "16", "--overwrite"]);
    assert_eq!(files(&out.join("images")).len(), 3);
}

#[test]
fn split_counts_and_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--out", p(&data), "--items", "520", "--size", "16"]);
    let read = |sub: &str| {
        let d = dir.path().join(sub);
        let l = std::fs::read_to_string(d.join("labeled.txt")).unwrap();
        let u = std::fs::read_to_string(d.join("unlabeled.txt")).unwrap();
        (l, u)
    };
    for (seed, sub) in [("0", "s0"), ("1", "s1")] {
        let out = dir.path().join(sub);
        ok(&["split", "--data", p(&data), "--n-labeled", "8", "--seed", seed, "--out", p(&out)]);
    }
    let (l0, u0) = read("s0");
    assert_eq!(l0.lines().count(), 8);
    assert_eq!(u0.lines().count(), 512);
    assert!(l0.lines().all(|line| line.split_whitespace().count() == 2));
    let (l1, _) = read("s1");
    assert_ne!(l0, l1);

    let bad = segmatch(&["split", "--data", p(&data), "--n-labeled", "600"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn reduced_unimatch_logs_match_fixmatch() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let fix = train(&data, &dir.path().join("fix"), &["--variant", "fixmatch", "--seed", "4"]);
    let uni = train(
        &data,
        &dir.path().join("uni"),
        &["--variant", "unimatch", "--lambda", "0", "--image-streams", "1", "--seed", "4"],
    );
    assert_eq!(fix.lines().count(), 3);
    assert_eq!(fix, uni);

    let run = dir.path().join("fix");
    for name in ["manifest.json", "config.toml", "checkpoint.bin"] {
        assert!(run.join(name).exists(), "{name}");
    }
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "completed");
    assert_eq!(manifest["seed"], 4);
}

#[test]
fn zero_threshold_keeps_every_pixel() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let log = train(&data, &dir.path().join("run"), &["--variant", "unimatch", "--tau", "0"]);
    for line in log.lines() {
        let rec: Value = serde_json::from_str(line).unwrap();
        assert_eq!(rec["mask_ratio"].as_f64(), Some(1.0), "{line}");
    }
}

#[test]
fn train_rejects_bad_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let out = dir.path().join("run");
    let bad_variant = segmatch(&["train", "--data", p(&data), "--out", p(&out), "--variant", "meanteacher"]);
    assert_eq!(bad_variant.status.code(), Some(1));
    let bad_tau = segmatch(&["train", "--data", p(&data), "--out", p(&out), "--tau", "1.5"]);
    assert_eq!(bad_tau.status.code(), Some(1));
}

#[test]
fn eval_modes_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let run = dir.path().join("run");
    train(&data, &run, &["--variant", "fixmatch"]);
    let ckpt = run.join("checkpoint.bin");
    let whole = dir.path().join("whole.json");
    let window = dir.path().join("window.json");
    ok(&["eval", "--data", p(&data), "--checkpoint", p(&ckpt), "--out", p(&whole)]);
    ok(&["eval", "--data", p(&data), "--checkpoint", p(&ckpt), "--window", "512", "--out", p(&window)]);
    let read = |f: &Path| -> Value { serde_json::from_str(&std::fs::read_to_string(f).unwrap()).unwrap() };
    let (a, b) = (read(&whole), read(&window));
    assert_eq!(a["classes"].as_array().unwrap().len(), 3);
    assert_eq!(a["num_items"], 12);
    assert_eq!(a["confusion"], b["confusion"]);
    assert_eq!(a["mean_iou"], b["mean_iou"]);
    assert_eq!(b["mode"]["mode"], "sliding_window");

    let missing = segmatch(&["eval", "--data", p(&data), "--checkpoint", p(&run.join("nope.bin"))]);
    assert_eq!(missing.status.code(), Some(1));
}
