use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mvpose_core::pipeline::{write_predictions, FramePrediction, PersonPrediction};
use mvpose_core::scene_forge::load_detections;

fn mvpose(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvpose"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, tracks: &str, frames: &str, eval_frames: &str) -> Output {
    mvpose(&[
        "synth",
        "--out",
        s(dir),
        "--seed",
        "4",
        "--tracks",
        tracks,
        "--frames",
        frames,
        "--eval-frames",
        eval_frames,
    ])
}

/// Short training settings so the command paths run in seconds.
fn quick_config(dir: &Path) -> PathBuf {
    let path = dir.join("quick.json");
    let cfg = serde_json::json!({
        "profile": "small",
        "matcher": {"max_steps": 3, "eval_every": 1, "val_graphs": 4, "graphs_per_batch": 1},
        "lifter": {"max_epochs": 1, "steps_per_epoch": 2, "batch_size": 4, "max_val_samples": 8}
    });
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

#[test]
fn help_succeeds_for_every_subcommand() {
    for sub in ["synth", "train-matcher", "train-lifter", "infer", "eval", "plot"] {
        let out = mvpose(&[sub, "--help"]);
        assert_eq!(out.status.code(), Some(0), "{sub}");
    }
    assert_eq!(mvpose(&["--help"]).status.code(), Some(0));
}

#[test]
fn unknown_flags_exit_with_two() {
    assert_eq!(mvpose(&["synth", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(mvpose(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn synth_writes_the_requested_files_deterministically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(synth(a.path(), "3", "5", "4").status.success());
    assert!(synth(b.path(), "3", "5", "4").status.success());
    let tracks: Vec<_> = fs::read_dir(a.path().join("tracks")).unwrap().collect();
    assert_eq!(tracks.len(), 3);
    for name in ["calibration.json", "eval.jsonl", "tracks/track_000.jsonl", "tracks/track_002.jsonl"] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name}");
    }
    assert_eq!(load_detections(a.path().join("eval.jsonl")).unwrap().len(), 4);
}

#[test]
fn missing_calibration_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"calibration": "nowhere/calib.json"}"#).unwrap();
    let out = mvpose(&["--config", s(&cfg), "synth", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("calibration"));

    let out = mvpose(&["train-lifter", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("calibration"));
}

#[test]
fn bad_config_field_is_reported_with_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"lifter": {"batch_sise": 3}}"#).unwrap();
    let out = mvpose(&["--config", s(&cfg), "synth", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lifter"));
}

fn perfect_predictions(gt: &Path, out: &Path) {
    let frames = load_detections(gt).unwrap();
    let preds: Vec<FramePrediction> = frames
        .iter()
        .map(|f| FramePrediction {
            frame_id: f.frame_id,
            persons: f
                .ground_truth
                .iter()
                .flatten()
                .map(|g| PersonPrediction {
                    group: Vec::new(),
                    confidence: 1.0,
                    joints: g.pose.joints().iter().map(|p| Some([p.x, p.y, p.z])).collect(),
                })
                .collect(),
        })
        .collect();
    write_predictions(&preds, fs::File::create(out).unwrap()).unwrap();
}

#[test]
fn perfect_predictions_have_full_recall() {
    let dir = tempfile::tempdir().unwrap();
    assert!(synth(dir.path(), "1", "2", "6").status.success());
    let gt = dir.path().join("eval.jsonl");
    let pred = dir.path().join("perfect.jsonl");
    perfect_predictions(&gt, &pred);
    let report_dir = dir.path().join("report");
    let out = mvpose(&["eval", "--pred", s(&pred), "--gt", s(&gt), "--out", s(&report_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(report_dir.join("report.csv")).unwrap();
    let recall = csv.lines().find(|l| l.starts_with("Recall,")).unwrap();
    assert_eq!(recall, "Recall,100.00,100.00,100.00,100.00,100.00,100.00");
    assert!(report_dir.join("report.json").exists());
}

#[test]
fn joint_count_mismatch_in_eval_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert!(synth(dir.path(), "1", "2", "2").status.success());
    let gt = dir.path().join("eval.jsonl");
    let pred = dir.path().join("bad.jsonl");
    let preds = vec![FramePrediction {
        frame_id: 0,
        persons: vec![PersonPrediction {
            group: Vec::new(),
            confidence: 1.0,
            joints: vec![Some([0.0, 0.0, 0.0]); 3],
        }],
    }];
    write_predictions(&preds, fs::File::create(&pred).unwrap()).unwrap();
    let out = mvpose(&["eval", "--pred", s(&pred), "--gt", s(&gt), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_infer_eval_plot_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(synth(d, "3", "12", "7").status.success());
    let cfg = quick_config(d);
    let calib = d.join("calibration.json");
    let tracks = d.join("tracks");
    let models = d.join("models");
    for cmd in ["train-matcher", "train-lifter"] {
        let out = mvpose(&[
            "--config",
            s(&cfg),
            cmd,
            "--calibration",
            s(&calib),
            "--tracks",
            s(&tracks),
            "--out",
            s(&models),
        ]);
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    for name in ["matcher_curve.csv", "lifter_curve.csv"] {
        let curve = fs::read_to_string(models.join(name)).unwrap();
        assert_eq!(curve.lines().next(), Some("epoch,loss,val_metric"));
        assert!(curve.lines().count() >= 2);
    }
    let threshold: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(models.join("matcher.threshold.json")).unwrap()).unwrap();
    assert!(threshold["threshold"].is_number());
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(models.join("lifter_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["inputs"].as_object().unwrap().len(), 4);

    // An empty frame still gets a line.
    let detections = d.join("with_empty.jsonl");
    let mut text = fs::read_to_string(d.join("eval.jsonl")).unwrap();
    text.push_str(r#"{"frame_id":99,"views":[],"gt":[]}"#);
    text.push('\n');
    fs::write(&detections, text).unwrap();

    let run = d.join("run");
    let out = mvpose(&[
        "infer",
        "--calibration",
        s(&calib),
        "--detections",
        s(&detections),
        "--matcher",
        s(&models.join("matcher.json")),
        "--lifter",
        s(&models.join("lifter.json")),
        "--out",
        s(&run),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let preds = fs::read_to_string(run.join("predictions.jsonl")).unwrap();
    assert_eq!(preds.lines().count(), 8);
    let last: serde_json::Value = serde_json::from_str(preds.lines().last().unwrap()).unwrap();
    assert_eq!(last["frame_id"], 99);
    assert_eq!(last["persons"].as_array().unwrap().len(), 0);
    let timing: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("timing.json")).unwrap()).unwrap();
    for key in ["t_pp", "t_3Dg", "t_3Di"] {
        assert!(timing[key].as_f64().unwrap() > 0.0, "{key}");
    }

    let out = mvpose(&[
        "eval",
        "--pred",
        s(&run.join("predictions.jsonl")),
        "--gt",
        s(&detections),
        "--timing",
        s(&run.join("timing.json")),
        "--out",
        s(&run),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(run.join("report.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(rows, ["metric", "Recall", "Precision", "AP", "MPJPE", "t_pp", "t_3Dg", "t_3Di"]);

    let out = mvpose(&["plot", "--pred", s(&run.join("predictions.jsonl")), "--frames", "3", "--out", s(&run)]);
    assert!(out.status.success());
    let svgs = fs::read_dir(run.join("plots"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "svg"))
        .count();
    assert_eq!(svgs, 3);
    assert!(run.join("plots/joints.csv").exists());

    // A lifter checkpoint for a different rig is refused with exit 4.
    let other = d.join("other");
    assert!(mvpose(&["synth", "--out", s(&other), "--seed", "5", "--tracks", "0", "--eval-frames", "0"])
        .status
        .success());
    let mut rig: serde_json::Value = serde_json::from_str(&fs::read_to_string(other.join("calibration.json")).unwrap()).unwrap();
    let cams = rig["cameras"].as_array_mut().unwrap();
    cams.pop();
    let small_rig = d.join("four_cameras.json");
    fs::write(&small_rig, rig.to_string()).unwrap();
    let out = mvpose(&[
        "infer",
        "--calibration",
        s(&small_rig),
        "--detections",
        s(&detections),
        "--matcher",
        s(&models.join("matcher.json")),
        "--lifter",
        s(&models.join("lifter.json")),
        "--out",
        s(&run),
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn plot_draws_ground_truth_frames() {
    let dir = tempfile::tempdir().unwrap();
    assert!(synth(dir.path(), "0", "1", "5").status.success());
    let out = mvpose(&["plot", "--dataset", s(&dir.path().join("eval.jsonl")), "--frames", "2", "--out", s(dir.path())]);
    assert!(out.status.success());
    let csv = fs::read_to_string(dir.path().join("plots/joints.csv")).unwrap();
    assert!(csv.starts_with("frame_id,person,joint,x,y,z\n"));
    assert!(dir.path().join("plots/frame_000001.svg").exists());
}
