use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gsseg::cli::SegmentationFile;
use gsseg::scene_io::{load_cameras, load_label_map, load_scene};

fn gsseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gsseg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = gsseg(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn synth(dir: &Path) -> String {
    let run = dir.to_str().unwrap().to_string();
    ok(&["synth", "--demo", "two-blob", "--run", &run]);
    run
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn synth_writes_a_loadable_fixture() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let cameras = load_cameras(dir.path().join("cameras.json")).unwrap();
    assert_eq!(cameras.len(), 8);
    let masks: Vec<_> = fs::read_dir(dir.path().join("masks")).unwrap().collect();
    assert_eq!(masks.len(), cameras.len());
    for c in &cameras {
        let m = load_label_map(dir.path().join(format!("masks/{:04}.png", c.id)), 3).unwrap();
        assert!(m.matches_camera(&c.camera));
    }
    assert_eq!(load_scene(dir.path().join("scene.ply"), 3).unwrap().len(), 1000);
    let planted: Vec<u32> = serde_json::from_value(json(&dir.path().join("planted_labels.json"))).unwrap();
    assert_eq!(planted.len(), 1000);
}

#[test]
fn synth_is_byte_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    synth(a.path());
    synth(b.path());
    for name in [
        "scene.ply",
        "cameras.json",
        "planted_labels.json",
        "masks/0003.png",
        "heldout/masks/0001.png",
    ] {
        assert_eq!(
            fs::read(a.path().join(name)).unwrap(),
            fs::read(b.path().join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn full_pipeline_composes() {
    let dir = tempfile::tempdir().unwrap();
    let run = synth(dir.path());
    let out = ok(&["train", "--run", &run]);
    assert!(out.contains("trained 300 iterations"));
    let report = json(&dir.path().join("report.json"));
    assert!(report["final_loss"].as_f64().unwrap() < 0.05);

    ok(&["refine", "--run", &run]);
    let seg: SegmentationFile = serde_json::from_value(json(&dir.path().join("segmentation.json"))).unwrap();
    assert_eq!(seg.class_of.len(), 1000);
    assert!(dir.path().join("segmented_colored.ply").exists());

    let table = ok(&["eval", "--run", &run]);
    assert!(table.contains("protocol: pooled (with background)"));
    let metrics = json(&dir.path().join("metrics.json"));
    assert!(metrics["miou"].as_f64().unwrap() >= 0.95);
    assert_eq!(metrics["gaussian_accuracy"].as_f64().unwrap(), 1.0);

    let heldout = dir.path().join("heldout");
    let h = heldout.to_str().unwrap();
    ok(&[
        "eval",
        "--run",
        &run,
        "--cameras",
        &format!("{h}/cameras.json"),
        "--masks",
        &format!("{h}/masks"),
        "--output",
        &format!("{h}/metrics.json"),
        "--protocol",
        "per-view",
    ]);
    assert!(json(&heldout.join("metrics.json"))["miou"].as_f64().unwrap() >= 0.95);

    ok(&["render", "--run", &run, "--probabilities"]);
    for suffix in ["labels.png", "labels_vis.png", "color.png", "class2.pgm"] {
        assert!(dir.path().join(format!("renders/0000_{suffix}")).exists(), "{suffix}");
    }

    ok(&["extract", "--run", &run, "--class", "0,1,2"]);
    assert_eq!(load_scene(dir.path().join("extracted.ply"), 3).unwrap().len(), 1000);
    let out = gsseg(&["extract", "--run", &run, "--class", "7"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ground_truth_scores_perfectly_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    let run = synth(dir.path());
    let masks = dir.path().join("masks");
    ok(&[
        "eval",
        "--run",
        &run,
        "--predictions",
        masks.to_str().unwrap(),
        "--classes",
        "3",
    ]);
    let metrics = json(&dir.path().join("metrics.json"));
    assert_eq!(metrics["miou"].as_f64().unwrap(), 1.0);
    assert_eq!(metrics["macc"].as_f64().unwrap(), 1.0);
}

#[test]
fn zero_iterations_keep_codes() {
    let dir = tempfile::tempdir().unwrap();
    let run = synth(dir.path());
    ok(&["train", "--run", &run, "--iterations", "0"]);
    let before = load_scene(dir.path().join("scene.ply"), 3).unwrap();
    let after = load_scene(dir.path().join("trained.ply"), 3).unwrap();
    assert_eq!(before, after);
}

#[test]
fn config_file_is_read_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let run = synth(dir.path());
    let config = dir.path().join("config.toml");
    fs::write(
        &config,
        "[train]\niterations = 7\nlearning_rate = 0.1\n\n[refine]\nbeta = 0.5\n",
    )
    .unwrap();
    let cfg = config.to_str().unwrap();
    ok(&["train", "--run", &run, "--config", cfg]);
    let report = json(&dir.path().join("report.json"));
    assert_eq!(report["iterations"], 7);
    assert_eq!(report["learning_rate"], 0.1);
    ok(&["train", "--run", &run, "--config", cfg, "--iterations", "3"]);
    assert_eq!(json(&dir.path().join("report.json"))["iterations"], 3);

    fs::write(&config, "[train]\nsteps = 7\n").unwrap();
    assert_eq!(gsseg(&["train", "--run", &run, "--config", cfg]).status.code(), Some(2));
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let run = synth(dir.path());
    let mut trained = Vec::new();
    for threads in ["1", "4"] {
        ok(&["train", "--run", &run, "--iterations", "40", "--threads", threads]);
        ok(&["refine", "--run", &run, "--threads", threads]);
        trained.push([
            fs::read(dir.path().join("trained.ply")).unwrap(),
            fs::read(dir.path().join("refined.ply")).unwrap(),
            fs::read(dir.path().join("segmentation.json")).unwrap(),
        ]);
    }
    assert!(trained[0] == trained[1]);
}

#[test]
fn refine_flags_and_idempotence() {
    let dir = tempfile::tempdir().unwrap();
    let run = synth(dir.path());
    ok(&["train", "--run", &run]);
    ok(&["refine", "--run", &run, "--no-filter"]);
    let seg: SegmentationFile = serde_json::from_value(json(&dir.path().join("segmentation.json"))).unwrap();
    assert!(seg.filtered.is_empty());
    let first = fs::read(dir.path().join("refined.ply")).unwrap();

    let second_dir = tempfile::tempdir().unwrap();
    let second = second_dir.path().to_str().unwrap();
    let refined = dir.path().join("refined.ply");
    ok(&[
        "refine",
        "--run",
        second,
        "--scene",
        refined.to_str().unwrap(),
        "--no-filter",
    ]);
    assert_eq!(fs::read(second_dir.path().join("refined.ply")).unwrap(), first);

    ok(&["refine", "--run", &run, "--no-knn", "--no-filter"]);
    assert_eq!(
        fs::read(dir.path().join("refined.ply")).unwrap(),
        fs::read(dir.path().join("trained.ply")).unwrap()
    );
}

#[test]
fn usage_and_runtime_errors_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let run = synth(dir.path());
    let out = gsseg(&["train", "--run", &run, "--masks", "/definitely/missing"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("masks directory not found"));

    assert_eq!(gsseg(&["train"]).status.code(), Some(2));
    assert_eq!(
        gsseg(&[
            "refine",
            "--run",
            &run,
            "--k",
            "5000",
            "--scene",
            &format!("{run}/scene.ply")
        ])
        .status
        .code(),
        Some(2)
    );

    fs::write(dir.path().join("scene.ply"), b"ply\nformat ascii 1.0\nend_header\n").unwrap();
    assert_eq!(gsseg(&["train", "--run", &run]).status.code(), Some(1));
}
