//! Command-line behavior: exit codes, precondition rejection, and the
//! output layout of each subcommand.

use std::path::{Path, PathBuf};
use std::process::Command;

fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_depthpose")
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!(
        "depthpose_cli_{tag}_{}_{}",
        std::process::id(),
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .unwrap()
            .as_nanos()
    ));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn simulate_into(dir: &Path) {
    let status = Command::new(binary())
        .args([
            "simulate",
            "--frames",
            "2",
            "--noise-f",
            "0.1",
            "--sample-rate",
            "0.3",
            "--seed",
            "1",
            "--out",
        ])
        .arg(dir)
        .status()
        .unwrap();
    assert!(status.success());
}

#[test]
fn refine_rejects_zero_iterations() {
    let root = temp_dir("iters0");
    let sim = root.join("sim");
    simulate_into(&sim);
    let out = Command::new(binary())
        .args(["refine", "--iters", "0", "--data"])
        .arg(&sim)
        .arg("--out")
        .arg(root.join("ref"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--iters"));
    std::fs::remove_dir_all(root).unwrap();
}

#[test]
fn refine_rejects_unknown_predictor() {
    let root = temp_dir("badpred");
    let sim = root.join("sim");
    simulate_into(&sim);
    let out = Command::new(binary())
        .args(["refine", "--predictor", "resnet", "--iters", "1", "--data"])
        .arg(&sim)
        .arg("--out")
        .arg(root.join("ref"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    std::fs::remove_dir_all(root).unwrap();
}

#[test]
fn refine_accepts_weights_and_toycnn() {
    let root = temp_dir("toycnn");
    let sim = root.join("sim");
    simulate_into(&sim);
    let refdir = root.join("ref");
    let status = Command::new(binary())
        .args([
            "refine",
            "--predictor",
            "toycnn",
            "--iters",
            "3",
            "--weights",
            "1.0,0.1,0.1,0.2",
            "--data",
        ])
        .arg(&sim)
        .arg("--out")
        .arg(&refdir)
        .status()
        .unwrap();
    assert!(status.success());
    for expected in [
        "loss_history.csv",
        "trajectory.txt",
        "params.bin",
        "manifest.json",
        "depth_refined.txt",
    ] {
        assert!(refdir.join(expected).exists(), "missing {expected}");
    }
    let csv = std::fs::read_to_string(refdir.join("loss_history.csv")).unwrap();
    assert!(csv.starts_with("iter,supervised,photometric,smoothness,mask_reg,total"));
    assert_eq!(csv.lines().count(), 1 + 3 + 1);
    std::fs::remove_dir_all(root).unwrap();
}

#[test]
fn evaluate_requires_ground_truth() {
    let root = temp_dir("nogt");
    let sim = root.join("sim");
    simulate_into(&sim);
    // A bare directory has no index files at all.
    let empty = root.join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let out = Command::new(binary())
        .args(["evaluate", "--pred"])
        .arg(&sim)
        .arg("--gt")
        .arg(&empty)
        .arg("--out")
        .arg(root.join("m.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    std::fs::remove_dir_all(root).unwrap();
}

#[test]
fn evaluate_emits_exact_metric_keys() {
    let root = temp_dir("keys");
    let sim = root.join("sim");
    simulate_into(&sim);
    let metrics_path = root.join("m.json");
    let status = Command::new(binary())
        .args(["evaluate", "--pred"])
        .arg(&sim)
        .arg("--gt")
        .arg(&sim)
        .arg("--out")
        .arg(&metrics_path)
        .status()
        .unwrap();
    assert!(status.success());
    let value: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&metrics_path).unwrap()).unwrap();
    let obj = value.as_object().unwrap();
    let mut keys: Vec<_> = obj.keys().map(|k| k.as_str()).collect();
    keys.sort_unstable();
    assert_eq!(
        keys,
        vec![
            "ate_m_mean",
            "ate_m_std",
            "imae_1perkm",
            "irmse_1perkm",
            "mae_mm",
            "photometric",
            "re_mean",
            "re_std",
            "rmse_mm",
        ]
    );
    // Self-evaluation: every error metric is zero.
    for key in ["rmse_mm", "mae_mm", "irmse_1perkm", "imae_1perkm", "re_mean"] {
        assert_eq!(obj[key].as_f64().unwrap(), 0.0, "{key}");
    }
    assert!(obj["ate_m_mean"].as_f64().unwrap() < 1e-9);
    std::fs::remove_dir_all(root).unwrap();
}

#[test]
fn gradcheck_rejects_malformed_size() {
    let out = Command::new(binary())
        .args(["gradcheck", "--size", "16by16"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_rejects_invalid_noise_config() {
    let root = temp_dir("badnoise");
    let out = Command::new(binary())
        .args(["simulate", "--sample-rate", "0.0", "--out"])
        .arg(root.join("sim"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    std::fs::remove_dir_all(root).unwrap();
}

#[test]
fn scene_file_round_trip() {
    let root = temp_dir("scenefile");
    let spec = serde_json::json!({
        "planes": [{"normal": [0.0, 0.0, 1.0], "offset": 2.0}],
        "texture_seed": 3,
        "intrinsics": {"fx": 40.0, "fy": 40.0, "cx": 15.5, "cy": 15.5, "width": 32, "height": 32},
        "frames": [
            {"timestamp": 0.0, "tangent": [0.0, 0.0, 0.0, 0.0, 0.0, 0.0]},
            {"timestamp": 0.1, "tangent": [0.0, 0.0, 0.0, 0.05, 0.0, 0.0]}
        ]
    });
    let scene_path = root.join("scene.json");
    std::fs::write(&scene_path, serde_json::to_string_pretty(&spec).unwrap()).unwrap();
    let sim = root.join("sim");
    let status = Command::new(binary())
        .args(["simulate", "--noise-f", "0", "--sample-rate", "1", "--scene"])
        .arg(&scene_path)
        .arg("--out")
        .arg(&sim)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(sim.join("rgb/000001.png").exists());
    std::fs::remove_dir_all(root).unwrap();
}
