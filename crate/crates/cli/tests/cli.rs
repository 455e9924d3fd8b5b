use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cdi_forge::nn::io::save_weights;
use cdi_forge::nn::{NetworkConfig, NetworkWeights};

fn run(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_cdi-forge"))
        .args(args)
        .current_dir(dir)
        .env("CDI_FORGE_LOG", "warn")
        .output()
        .expect("spawn cdi-forge");
    out
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Small 16^3 setup shared by the heavier tests.
const SMALL: &str = r#"{
  "generator": { "grid": { "dims": { "nx": 16, "ny": 16, "nz": 16 }, "voxel_pitch": 2.0 }, "box_padding": 2.0 },
  "network": { "input_dim": 16, "encoder_channels": [2, 4] },
  "training": { "epochs": [1, 1, 1, 1], "batch_size": 2 },
  "retrieval": { "total_iters": 60 },
  "refinement": { "iterations": 20 },
  "dataset": { "test_fraction": 0.34 }
}"#;

fn volume_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir.join("volumes"))
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn generate_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["generate", "--count", "4", "--seed", "7", "--out", "a"]);
    ok(d, &["generate", "--count", "4", "--seed", "7", "--out", "b"]);
    assert_eq!(fs::read(d.join("a/manifest.json")).unwrap(), fs::read(d.join("b/manifest.json")).unwrap());
    let (va, vb) = (volume_files(&d.join("a")), volume_files(&d.join("b")));
    assert_eq!(va.len(), 4 * 2 * 3);
    assert_eq!(va, vb);
    let m = json(&d.join("a/manifest.json"));
    assert_eq!(m["samples"].as_array().unwrap().len(), 8);
    assert_eq!(json(&d.join("a/config.json"))["seed"], 7);
    let out = ok(d, &["validate", "a", "a/volumes/s0000000_phase.cdiv"]);
    assert_eq!(out.lines().filter(|l| l.starts_with("ok")).count(), 2);
}

#[test]
fn retrieve_writes_full_chi_history() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["generate", "--count", "1", "--seed", "3", "--out", "data"]);
    let m = "data/volumes/u0000000_magnitude.cdiv";
    ok(d, &["retrieve", "--magnitude", m, "--restarts", "1", "--out", "r"]);
    let csv = fs::read_to_string(d.join("r/chi_history.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("iteration,chi2"));
    assert_eq!(lines.count(), 620);
    for f in ["object.cdiv", "support.cdiv", "config.json"] {
        assert!(d.join("r").join(f).exists(), "{f}");
    }
}

#[test]
fn predict_then_refine_does_not_increase_loss() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["generate", "--count", "1", "--seed", "5", "--out", "data"]);
    let w = NetworkWeights::<f32>::init(&NetworkConfig::default(), 1).unwrap();
    save_weights(&w, &d.join("w.cdnw")).unwrap();
    let m = "data/volumes/s0000000_magnitude.cdiv";
    ok(d, &["predict", "--weights", "w.cdnw", "--magnitude", m, "--out", "p"]);
    ok(d, &["refine", "--object", "p/object.cdiv", "--magnitude", m, "--out", "f"]);
    let before = json(&d.join("p/predict.json"))["magnitude_mae"].as_f64().unwrap();
    let after = json(&d.join("f/refine.json"))["best_loss"].as_f64().unwrap();
    assert!(after <= before, "{after} > {before}");
    let loss_rows = fs::read_to_string(d.join("f/loss.csv")).unwrap().lines().count();
    assert_eq!(loss_rows, 1 + 200);
}

#[test]
fn train_and_rerun_from_resolved_config_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("small.json"), SMALL).unwrap();
    ok(d, &["--config", "small.json", "generate", "--count", "3", "--seed", "2", "--out", "data"]);
    ok(d, &["--config", "small.json", "train", "--data", "data", "--seed", "4", "--out", "t1"]);
    ok(d, &["--config", "t1/config.json", "train", "--data", "data", "--out", "t2"]);
    assert_eq!(fs::read(d.join("t1/weights.cdnw")).unwrap(), fs::read(d.join("t2/weights.cdnw")).unwrap());
    let metrics = json(&d.join("t1/metrics.json"));
    assert_eq!(metrics["epochs"].as_array().unwrap().len(), 4);

    let m = "data/volumes/s0000000_magnitude.cdiv";
    ok(d, &["--config", "small.json", "retrieve", "--magnitude", m, "--restarts", "2", "--out", "r1"]);
    ok(d, &["--config", "r1/config.json", "retrieve", "--magnitude", m, "--restarts", "2", "--out", "r2"]);
    for f in ["object.cdiv", "support.cdiv", "chi_history.csv"] {
        assert_eq!(fs::read(d.join("r1").join(f)).unwrap(), fs::read(d.join("r2").join(f)).unwrap(), "{f}");
    }
    ok(d, &["--config", "small.json", "refine", "--object", "r1/object.cdiv", "--magnitude", m, "--out", "f1"]);
    ok(d, &["--config", "f1/config.json", "refine", "--object", "r1/object.cdiv", "--magnitude", m, "--out", "f2"]);
    assert_eq!(fs::read(d.join("f1/refined.cdiv")).unwrap(), fs::read(d.join("f2/refined.cdiv")).unwrap());

    ok(d, &["--config", "small.json", "evaluate", "--data", "data", "--weights", "t1/weights.cdnw", "--refine", "--out", "e"]);
    let csv = fs::read_to_string(d.join("e/evaluation.csv")).unwrap();
    assert!(csv.starts_with("sample_id,method,shape_mae,phase_mae,chi2,twin_used,wall_ms"));
    assert!(json(&d.join("e/evaluation.json"))["nn_refine"]["count"].as_u64().unwrap() >= 1);

    ok(d, &["--config", "small.json", "benchmark", "--data", "data", "--weights", "t1/weights.cdnw", "--limit", "1", "--out", "b"]);
    assert_eq!(fs::read_to_string(d.join("b/benchmark.csv")).unwrap().lines().count(), 1 + 3);
    assert_eq!(json(&d.join("b/benchmark.json"))["retrieval_iterations"], 60);
}

#[test]
fn resample_brings_volume_to_network_dims() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["generate", "--count", "1", "--out", "data"]);
    ok(d, &["resample", "--input", "data/volumes/s0000000_magnitude.cdiv", "--dim", "16", "--out", "s"]);
    let out = ok(d, &["validate", "s/resampled.cdiv"]);
    assert!(out.contains("(16, 16, 16)"), "{out}");
}

#[test]
fn bad_inputs_fail_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("typo.json"), "{\n  \"seed\": 1,\n  \"retreival\": {}\n}").unwrap();
    let out = run(d, &["--config", "typo.json", "validate", "x"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("retreival") && err.contains("line 3"), "{err}");

    let out = run(d, &["predict", "--weights", "missing.cdnw", "--magnitude", "m.cdiv"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.cdnw"));

    fs::write(d.join("junk.cdiv"), b"CDIX\x01\x00\x00\x00").unwrap();
    let out = run(d, &["validate", "junk.cdiv"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("FAIL"));
}
