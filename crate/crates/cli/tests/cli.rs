mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::*;
use gangealing::correspond::Overlay;
use gangealing::datapipe::{encode_overlay, list_images, load_image, ManifestEntry};
use gangealing::keypoints::KeypointSet;

fn gangeal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gangeal")).args(args).env_remove("GANGEAL_CHECKPOINT").output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    assert_eq!(gangeal(&[]).status.code(), Some(1));
    let out = gangeal(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(gangeal(&["filter", "in"]).status.code(), Some(1), "missing checkpoint is a usage error");
    assert_eq!(gangeal(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = gangeal(&["filter", "-c", p(&missing), p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn evaluate_perfect_predictions_prints_full_pck() {
    let dir = tempfile::tempdir().unwrap();
    let pts = points().points;
    let q = serde_json::json!([{
        "source_id": "a", "target_id": "b",
        "source": {"points": pts}, "target": {"points": pts}, "prediction": {"points": pts},
        "bbox": {"x": 0.0, "y": 0.0, "width": 32.0, "height": 32.0}
    }]);
    let path = dir.path().join("q.json");
    std::fs::write(&path, q.to_string()).unwrap();
    let csv = dir.path().join("curve.csv");
    let out = gangeal(&["evaluate", p(&path), "--alphas", "0.05,0.1", "--csv", p(&csv)]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout.contains("alpha=0.1 pck=1.0 n_points=3"), "{stdout}");
    assert_eq!(stdout.lines().count(), 2);
    assert!(std::fs::read_to_string(&csv).unwrap().starts_with("alpha,pck,n_points\n0.05,1.000000,3"));
    // A missing prediction needs a model.
    std::fs::write(&path, q.to_string().replace(",\"prediction\":{\"points\":", ",\"ignored\":{\"points\":")).unwrap();
    assert_eq!(gangeal(&["evaluate", p(&path)]).status.code(), Some(2));
}

#[test]
fn evaluate_transfers_with_a_checkpoint_when_predictions_are_absent() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), 2);
    let pts = points().points;
    let q = serde_json::json!([{
        "source_id": "toy00", "target_id": "toy00",
        "source": {"points": pts}, "target": {"points": pts},
        "bbox": {"x": 0.0, "y": 0.0, "width": 32.0, "height": 32.0}
    }]);
    let path = dir.path().join("q.json");
    std::fs::write(&path, q.to_string()).unwrap();
    let images = dir.path().join("images");
    let out = gangeal(&["evaluate", "-c", p(&dir.path().join("ckpt")), p(&path), "--images", p(&images)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("alpha=0.1 pck=1.0"));
}

#[test]
fn filter_keep_all_lists_every_input() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), 4);
    let out_dir = dir.path().join("out");
    let out = gangeal(&["filter", "-c", p(&dir.path().join("ckpt")), p(&dir.path().join("images")), "--keep", "1.0", "-o", p(&out_dir)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: Vec<ManifestEntry> = serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    let ids: Vec<&str> = manifest.iter().map(|e| e.id.as_str()).collect();
    assert_eq!(ids, ["toy00", "toy01", "toy02", "toy03"]);
    assert!(manifest.iter().all(|e| e.kept));
    assert_eq!(std::fs::read_to_string(out_dir.join("report.csv")).unwrap().lines().count(), 5);
    let bad = gangeal(&["filter", "-c", p(&dir.path().join("ckpt")), p(&dir.path().join("images")), "--keep", "0"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn checkpoint_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), 2);
    let out_dir = dir.path().join("out");
    let out = Command::new(env!("CARGO_BIN_EXE_gangeal"))
        .args(["filter", p(&dir.path().join("images")), "-o", p(&out_dir)])
        .env("GANGEAL_CHECKPOINT", dir.path().join("ckpt"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("manifest.json").exists());
}

#[test]
fn self_transfer_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), 1);
    let kp = dir.path().join("kp.json");
    std::fs::write(&kp, points().to_json().unwrap()).unwrap();
    let img = dir.path().join("images/toy00.png");
    let res = dir.path().join("moved.json");
    let out = gangeal(&["transfer", "-c", p(&dir.path().join("ckpt")), p(&img), p(&img), p(&kp), "-o", p(&res)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let moved = KeypointSet::from_json(&std::fs::read_to_string(&res).unwrap()).unwrap();
    assert!(max_gap(&points().points, &moved.points) <= 2.0);
    assert_eq!(moved.points.iter().map(|k| k.visible).collect::<Vec<_>>(), [true, true, true, false]);
}

#[test]
fn fresh_congeal_and_transparent_propagation_keep_images() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), 3);
    let ckpt = dir.path().join("ckpt");
    let images = dir.path().join("images");
    let congealed = dir.path().join("congealed");
    assert_eq!(gangeal(&["congeal", "-c", p(&ckpt), p(&images), p(&congealed)]).status.code(), Some(0));
    let overlay = dir.path().join("overlay.png");
    std::fs::write(&overlay, encode_overlay(&Overlay::transparent(RES, RES)).unwrap()).unwrap();
    let propagated = dir.path().join("prop");
    assert_eq!(gangeal(&["propagate", "-c", p(&ckpt), p(&overlay), p(&images), p(&propagated)]).status.code(), Some(0));
    let clip = dir.path().join("clip");
    assert_eq!(gangeal(&["propagate", "-c", p(&ckpt), p(&overlay), p(&images), p(&clip), "--video"]).status.code(), Some(0));
    for path in list_images(&images).unwrap() {
        let name = path.file_name().unwrap();
        let x = load_image(&path, None).unwrap();
        for out in [&congealed, &propagated, &clip] {
            assert_eq!(load_image(&out.join(name), None).unwrap(), x);
        }
    }
    assert!(congealed.join("manifest.json").exists());
}

#[test]
fn align_writes_crops_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), 2);
    let out_dir = dir.path().join("aligned");
    let out = gangeal(&["align", "-c", p(&dir.path().join("ckpt")), p(&dir.path().join("images")), p(&out_dir), "--recursion", "2"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: Vec<ManifestEntry> = serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.len(), 2);
    assert!(out_dir.join("toy00.png").exists());
}

#[test]
fn train_writes_metrics_and_a_loadable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("toy.cfg");
    std::fs::write(&cfg, "resolution = 32\npca_pool = 200\nwidths = 4, 6\nhidden = 8\ntotal_steps = 2\nbatch = 2\nanneal_steps = 1\n").unwrap();
    let run = dir.path().join("run");
    let out = gangeal(&["--sequential", "train", p(&cfg), "-o", p(&run)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(run.join("metrics.csv")).unwrap().lines().count(), 3);
    assert_eq!(gangealing::checkpoint::load(&run.join("final")).unwrap().step, 2);
    std::fs::write(&cfg, "resolution = 32\nresolution = 64\n").unwrap();
    assert_eq!(gangeal(&["train", p(&cfg), "-o", p(&run)]).status.code(), Some(2));
}
