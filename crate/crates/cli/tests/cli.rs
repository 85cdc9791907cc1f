use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn cvseq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cvseq")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_json(p: &Path, v: &Value) {
    fs::write(p, serde_json::to_string_pretty(v).unwrap()).unwrap();
}

fn synth_config() -> Value {
    json!({
        "grid": 4, "seq_len": 3, "channels": 4, "sat_px": 32,
        "step_px": 8.0, "min_distractor_cells": 2.0
    })
}

fn run_config(steps: usize) -> Value {
    json!({
        "model": {
            "dim": 8, "channels": 4, "grid": 4, "fusion_rounds": 1, "heads": 2,
            "ffn_hidden": 16, "seq_len": 3, "sat_px": 32, "ground_px": [8, 8],
            "extractor": "identity"
        },
        "train": { "steps": steps, "seq_len": 3, "seed": 3 }
    })
}

/// Writes a small synthetic dataset and returns its manifest path.
fn synth(dir: &Path, count: usize, seed: u64) -> String {
    let cfg = dir.join("synth.json");
    write_json(&cfg, &synth_config());
    let out = dir.join(format!("data{seed}"));
    let res = cvseq(&[
        "synth",
        "--config",
        path(&cfg),
        "--count",
        &count.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        path(&out),
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    assert!(out.join("config.json").exists());
    path(&out.join("manifest.jsonl")).to_string()
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&cvseq(&["--help"])), 0);
    assert_eq!(code(&cvseq(&["--version"])), 0);
    assert_eq!(code(&cvseq(&["train", "--help"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&cvseq(&[])), 1);
    assert_eq!(code(&cvseq(&["frobnicate"])), 1);
    assert_eq!(code(&cvseq(&["eval", "--bogus"])), 1);
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), 4, 1);
    let cfg = dir.path().join("run.json");
    write_json(&cfg, &run_config(5));

    let base = dir.path().join("base");
    let res = cvseq(&[
        "train", "--mode", "baseline", "--config", path(&cfg), "--data", &manifest, "--out", path(&base),
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    assert!(stdout(&res).contains("5 steps"));
    let log = fs::read_to_string(base.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 5);
    let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["step"], 0);

    let seq = dir.path().join("seq");
    let ckpt = base.join("model.ckpt");
    let res = cvseq(&[
        "train",
        "--mode",
        "sequential",
        "--config",
        path(&cfg),
        "--data",
        &manifest,
        "--init",
        path(&ckpt),
        "--out",
        path(&seq),
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));

    let report = dir.path().join("reports/seq.json");
    let res = cvseq(&[
        "--threads",
        "2",
        "eval",
        "--checkpoint",
        path(&seq.join("model.ckpt")),
        "--data",
        &manifest,
        "--out",
        path(&report),
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let parsed: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(parsed["count"], 4);
    assert!(parsed["mean_error_m"].as_f64().unwrap() >= 0.0);

    // single-threaded run and CSV output agree on the numbers
    let csv = dir.path().join("reports/seq.csv");
    let res = cvseq(&[
        "eval",
        "--checkpoint",
        path(&seq.join("model.ckpt")),
        "--data",
        &manifest,
        "--out",
        path(&csv),
        "--csv",
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 5);
    let mean = parsed["mean_error_m"].as_f64().unwrap();
    assert!(stdout(&res).contains(&format!("mean {mean:.3} m")));
}

#[test]
fn fixed_seed_training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), 2, 2);
    let cfg = dir.path().join("run.json");
    write_json(&cfg, &run_config(3));
    let mut bytes = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let res = cvseq(&[
            "train", "--mode", "baseline", "--config", path(&cfg), "--data", &manifest, "--out", path(&out),
        ]);
        assert_eq!(code(&res), 0, "{}", stderr(&res));
        bytes.push(fs::read(out.join("model.ckpt")).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn sequential_without_init_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), 2, 3);
    let cfg = dir.path().join("run.json");
    write_json(&cfg, &run_config(1));
    let out = dir.path().join("o");
    let args = [
        "train", "--mode", "sequential", "--config", path(&cfg), "--data", &manifest, "--out", path(&out),
    ];
    let res = cvseq(&args);
    assert_eq!(code(&res), 1);
    assert!(stderr(&res).contains("--init"));

    let mut args = args.to_vec();
    args.push("--no-pretrain");
    let res = cvseq(&args);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
}

#[test]
fn unknown_config_field_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), 1, 4);
    let cfg = dir.path().join("run.json");
    let mut v = run_config(1);
    v["train"]["learning_rate"] = json!(0.1);
    write_json(&cfg, &v);
    let res = cvseq(&[
        "train", "--mode", "baseline", "--config", path(&cfg), "--data", &manifest, "--out",
        path(&dir.path().join("o")),
    ]);
    assert_eq!(code(&res), 1);
    assert!(stderr(&res).contains("learning_rate"));
}

#[test]
fn empty_dataset_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let full = synth(dir.path(), 1, 5);
    let empty = synth(dir.path(), 0, 6);
    assert_eq!(fs::read_to_string(&empty).unwrap(), "");

    let cfg = dir.path().join("run.json");
    write_json(&cfg, &run_config(1));
    let out = dir.path().join("m");
    let res = cvseq(&[
        "train", "--mode", "baseline", "--config", path(&cfg), "--data", &full, "--out", path(&out),
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));

    let res = cvseq(&[
        "eval",
        "--checkpoint",
        path(&out.join("model.ckpt")),
        "--data",
        &empty,
        "--out",
        path(&dir.path().join("r.json")),
    ]);
    assert_eq!(code(&res), 2, "{}", stderr(&res));
}

#[test]
fn missing_manifest_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let res = cvseq(&[
        "segment",
        "--input",
        path(&dir.path().join("nope.jsonl")),
        "--out",
        path(&dir.path().join("o")),
    ]);
    assert_eq!(code(&res), 2);
}

/// A straight northbound track with one frame per metre.
fn write_track(dir: &Path, frames: usize) -> String {
    let mut text = String::new();
    for i in 0..frames {
        let rec = json!({
            "seq_id": "drive",
            "frame_index": i,
            "lat": 49.0 + i as f64 / 111_190.0,
            "lon": 8.4,
            "image_path": format!("img/{i:04}.png"),
        });
        text += &format!("{rec}\n");
    }
    let p = dir.join("raw.jsonl");
    fs::write(&p, text).unwrap();
    path(&p).to_string()
}

#[test]
fn segment_writes_sequences_with_patches() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_track(dir.path(), 60);
    let out = dir.path().join("seg");
    let res = cvseq(&["segment", "--input", &input, "--out", path(&out), "--jitter-m", "0"]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    assert!(stdout(&res).contains("1 sequences kept"), "{}", stdout(&res));
    assert!(out.join("config.json").exists());

    let text = fs::read_to_string(out.join("manifest.jsonl")).unwrap();
    let recs: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(recs.len(), 7);
    for (i, r) in recs.iter().enumerate() {
        assert_eq!(r["frame_index"], i);
        assert_eq!(r["source_frame_index"], 8 * i);
        assert!(r["sat_center_lat"].is_number());
        assert!(Path::new(r["image_path"].as_str().unwrap()).is_absolute());
    }
    // the patch is centred on the middle frame
    let mid = recs[3]["lat"].as_f64().unwrap();
    assert!((recs[0]["sat_center_lat"].as_f64().unwrap() - mid).abs() < 1e-9);

    // rerunning gives the same bytes
    let again = dir.path().join("seg2");
    let res = cvseq(&["segment", "--input", &input, "--out", path(&again), "--jitter-m", "0"]);
    assert_eq!(code(&res), 0);
    assert_eq!(text, fs::read_to_string(again.join("manifest.jsonl")).unwrap());
}

#[test]
fn segment_with_impossible_constraints_keeps_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_track(dir.path(), 60);
    let out = dir.path().join("seg");
    let res = cvseq(&["segment", "--input", &input, "--out", path(&out), "--min-frames", "9999"]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    assert!(stdout(&res).contains("0 sequences kept"));
    assert!(stderr(&res).contains("no sequence"));
    assert_eq!(fs::read_to_string(out.join("manifest.jsonl")).unwrap(), "");
}

#[test]
fn segment_rejects_bad_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_track(dir.path(), 10);
    let res = cvseq(&["segment", "--input", &input, "--out", path(&dir.path().join("o")), "--spacing-m", "0"]);
    assert_eq!(code(&res), 1);
}

#[test]
fn gradcheck_passes_and_fails_on_zero_tolerance() {
    let res = cvseq(&["gradcheck", "--scale", "tiny", "--json"]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let outcomes: Vec<Value> = serde_json::from_str(&stdout(&res)).unwrap();
    assert!(outcomes.len() > 20);
    assert!(outcomes.iter().any(|o| o["kind"] == "model"));

    let res = cvseq(&["gradcheck", "--tol", "0"]);
    assert_eq!(code(&res), 3);
    assert!(stderr(&res).contains("gradient check failed"));
}
