//! End-to-end tests driving the compiled `ohda` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

use ohda_cli::commands::ablation_variants;
use ohda_cli::config::RunConfig;
use ohda_core::eval::read_report;
use ohda_core::scenegen::read_dataset;
use ohda_core::trainer::{load_state, Toggles};

fn ohda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ohda"))
        .args(args)
        .output()
        .expect("binary should spawn")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn assert_fails_mentioning(out: &Output, needle: &str) {
    assert!(!out.status.success(), "command unexpectedly succeeded");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains(needle),
        "stderr should mention {needle:?}, got: {stderr}"
    );
}

/// A pair of small domains that trains in seconds.
fn tiny_config(root: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.train.seed = 11;
    cfg.train.pretrain_epochs = 2;
    cfg.train.adapt_epochs = 1;
    cfg.train.detector.seeds = 8;
    cfg.train.detector.feature_dim = 16;
    cfg.train.detector.neighbor_cap = 8;
    cfg.train.detector.radius = 0.8;
    for spec in [&mut cfg.source, &mut cfg.target] {
        spec.room = [4.0, 4.0, 3.0];
        spec.points_per_scene = 220;
        spec.objects_min = 3;
        spec.objects_max = 4;
    }
    cfg.target.clutter_points = 32;
    cfg.data.root = root.join("data");
    cfg.data.train_scenes = 6;
    cfg.data.eval_scenes = 2;
    cfg.out_dir = root.join("out");
    cfg
}

fn write_config(root: &Path, cfg: &RunConfig) -> PathBuf {
    let path = root.join("config.toml");
    fs::write(&path, toml::to_string(cfg).unwrap()).unwrap();
    path
}

fn path_str(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn ground_truth_detections_score_a_perfect_map() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg_path = write_config(dir.path(), &cfg);
    assert_ok(&ohda(&["--config", path_str(&cfg_path), "gen-data"]));

    let split = cfg.split_dir("target_eval");
    let (scenes, _) = read_dataset(&split).unwrap();
    let stored: Vec<Vec<Value>> = scenes
        .iter()
        .map(|scene| {
            scene
                .objects
                .iter()
                .map(|o| {
                    json!({
                        "center": o.bbox.center.to_array(),
                        "size": o.bbox.size.to_array(),
                        "class_id": o.class_id,
                        "score": 1.0,
                    })
                })
                .collect()
        })
        .collect();
    let det_path = dir.path().join("detections.json");
    fs::write(&det_path, serde_json::to_string(&stored).unwrap()).unwrap();

    let out = ohda(&[
        "--config",
        path_str(&cfg_path),
        "eval",
        "--detections",
        path_str(&det_path),
    ]);
    assert_ok(&out);
    let report = read_report(&cfg.out_dir.join("metrics.json")).unwrap();
    assert_eq!(report.map25, 1.0);
    assert_eq!(report.map50, 1.0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("mAP@0.25 1.0000"), "stdout: {stdout}");
}

#[test]
fn toggles_off_adaptation_extends_pretraining() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.train.toggles = Toggles::none();
    let cfg_path = write_config(dir.path(), &cfg);
    assert_ok(&ohda(&["--config", path_str(&cfg_path), "gen-data"]));

    let long = dir.path().join("long");
    let split = dir.path().join("split");
    assert_ok(&ohda(&[
        "--config",
        path_str(&cfg_path),
        "--out",
        path_str(&long),
        "--epochs",
        "3",
        "pretrain",
    ]));
    assert_ok(&ohda(&[
        "--config",
        path_str(&cfg_path),
        "--out",
        path_str(&split),
        "pretrain",
    ]));
    assert_ok(&ohda(&[
        "--config",
        path_str(&cfg_path),
        "--out",
        path_str(&split),
        "adapt",
    ]));

    let straight = load_state(&long.join("pretrain_state.json")).unwrap();
    let resumed = load_state(&split.join("adapt_state.json")).unwrap();
    assert_eq!(straight.step, resumed.step);
    assert_eq!(straight.student.params(), resumed.student.params());

    // The final eval of the adapt run matches evaluating the long pretrain.
    assert_ok(&ohda(&[
        "--config",
        path_str(&cfg_path),
        "--out",
        path_str(&long),
        "eval",
        "--checkpoint",
        path_str(&long.join("pretrain_checkpoint")),
    ]));
    let from_pretrain = read_report(&long.join("metrics.json")).unwrap();
    let from_adapt = read_report(&split.join("metrics.json")).unwrap();
    assert_eq!(from_pretrain.map25, from_adapt.map25);
    assert_eq!(from_pretrain.map50, from_adapt.map50);
    assert_eq!(from_pretrain.classes, from_adapt.classes);
}

#[test]
fn ablate_reports_every_declared_variant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg_path = write_config(dir.path(), &cfg);
    assert_ok(&ohda(&["--config", path_str(&cfg_path), "gen-data"]));
    assert_ok(&ohda(&["--config", path_str(&cfg_path), "--epochs", "1", "pretrain"]));
    assert_ok(&ohda(&["--config", path_str(&cfg_path), "--epochs", "0", "ablate"]));

    let summary: Vec<Value> =
        serde_json::from_str(&fs::read_to_string(cfg.out_dir.join("ablate_summary.json")).unwrap())
            .unwrap();
    let declared: Vec<&str> = ablation_variants().iter().map(|(name, _)| *name).collect();
    let reported: Vec<&str> = summary
        .iter()
        .map(|row| row["name"].as_str().unwrap())
        .collect();
    assert_eq!(reported, declared);
    for row in &summary {
        assert!(row["map25"].as_f64().unwrap().is_finite());
        assert!(row["map50"].as_f64().unwrap().is_finite());
    }
    for name in declared {
        let variant = cfg.out_dir.join("ablate").join(name);
        for artifact in [
            "metrics.json",
            "adapt_state.json",
            "epochs.json",
            "adapt_checkpoint/manifest.json",
        ] {
            assert!(variant.join(artifact).is_file(), "{name} missing {artifact}");
        }
    }
}

#[test]
fn unknown_config_keys_fail_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let base = toml::to_string(&cfg).unwrap();

    let top = dir.path().join("top.toml");
    fs::write(&top, format!("mystery = 1\n{base}")).unwrap();
    assert_fails_mentioning(&ohda(&["--config", path_str(&top), "gen-data"]), "mystery");

    let nested = dir.path().join("nested.toml");
    fs::write(&nested, "[train.pcat]\nbeta = 0.9\ntypo_field = 2\n").unwrap();
    assert_fails_mentioning(
        &ohda(&["--config", path_str(&nested), "gen-data"]),
        "typo_field",
    );
}

#[test]
fn flag_overrides_are_echoed_into_run_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg_path = write_config(dir.path(), &cfg);
    assert_ok(&ohda(&[
        "--config",
        path_str(&cfg_path),
        "--seed",
        "99",
        "--no-cla",
        "--no-mpr",
        "gen-data",
    ]));
    let echo: Value =
        serde_json::from_str(&fs::read_to_string(cfg.out_dir.join("run.json")).unwrap()).unwrap();
    assert_eq!(echo["command"], "gen-data");
    assert_eq!(echo["config"]["train"]["seed"], 99);
    assert_eq!(echo["config"]["train"]["toggles"]["cla"], false);
    assert_eq!(echo["config"]["train"]["toggles"]["mpr"], false);
    assert_eq!(echo["config"]["train"]["toggles"]["hla"], true);
}

#[test]
fn invalid_log_levels_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg_path = write_config(dir.path(), &cfg);
    let out = Command::new(env!("CARGO_BIN_EXE_ohda"))
        .args(["--config", path_str(&cfg_path), "gen-data"])
        .env("OHDA_LOG_LEVEL", "chatty")
        .output()
        .unwrap();
    assert_fails_mentioning(&out, "OHDA_LOG_LEVEL");
}

#[test]
fn eval_requires_exactly_one_input() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg_path = write_config(dir.path(), &cfg);
    assert_ok(&ohda(&["--config", path_str(&cfg_path), "gen-data"]));
    let out = ohda(&["--config", path_str(&cfg_path), "eval"]);
    assert_fails_mentioning(&out, "exactly one");
}
