use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use echofusion::io;
use echofusion::TrackStatus;

const SMALL: &str = r#"
[scene]
seed = 3
[[scene.primitives]]
shape = { kind = "ellipsoid", radii = [25.0, 55.0, 40.0] }
center = [0.0, 95.0, 0.0]
label = "foreground"
intensity_mean = 200.0
[trajectory]
frames = 4
[camera]
width = 240
height = 240
[tsdf]
resolution = 128
"#;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_echofusion")).args(args).env("ECHOFUSION_THREADS", "1").output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn write_config(dir: &Path, extra: &str) -> String {
    let p = dir.join("scene.toml");
    fs::write(&p, format!("{SMALL}{extra}")).unwrap();
    p.to_str().unwrap().to_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn sim_writes_one_volume_pair_per_frame() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = tmp.path().join("frames");
    ok(&bin(&["sim", "--config", &cfg, "--out", s(&out)]));
    let mut names: Vec<String> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    let expected: Vec<String> = (0..4)
        .map(|k| format!("intensity_{k:04}.mha"))
        .chain(std::iter::once("gt.jsonl".into()))
        .chain((0..4).map(|k| format!("seg_{k:04}.mha")))
        .collect();
    let mut expected = expected;
    expected.sort();
    assert_eq!(names, expected);
    let gt = io::read_trajectory(&out.join("gt.jsonl")).unwrap();
    assert_eq!(gt.len(), 4);
    assert_eq!(gt[0].pose(), echofusion::RigidPose::identity());
}

#[test]
fn missing_config_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin(&["sim", "--config", s(&tmp.path().join("nope.toml")), "--out", s(tmp.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("config not found"));
}

#[test]
fn track_with_no_frames_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin(&["track", "--frames", s(tmp.path()), "--out", s(&tmp.path().join("t"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no intensity_"));
}

#[test]
fn dropout_frame_is_one_loss_and_pipeline_completes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[artifacts]\ndropout_frames = [2]\n");
    let frames = tmp.path().join("frames");
    let track = tmp.path().join("track");
    ok(&bin(&["sim", "--config", &cfg, "--out", s(&frames)]));
    ok(&bin(&["track", "--config", &cfg, "--frames", s(&frames), "--out", s(&track)]));

    let traj = io::read_trajectory(&track.join("trajectory.jsonl")).unwrap();
    let statuses: Vec<TrackStatus> = traj.iter().map(|r| r.status).collect();
    use TrackStatus::{Lost, Tracked};
    assert_eq!(statuses, vec![Tracked, Tracked, Lost, Tracked]);
    assert!(track.join("mesh.ply").is_file());
    assert!(track.join("model_tsdf.mha").is_file() && track.join("model_weight.mha").is_file());
    let mesh = io::read_ply(&track.join("mesh.ply")).unwrap();
    assert!(!mesh.triangles.is_empty());

    let fused = tmp.path().join("fused").join("volume.mha");
    ok(&bin(&["fuse", "--frames", s(&frames), "--trajectory", s(&track.join("trajectory.jsonl")), "--out", s(&fused)]));
    assert!(fused.is_file());
    for plane in ["xy", "yz", "xz"] {
        assert!(fused.with_file_name(format!("volume_{plane}.pgm")).is_file(), "{plane}");
    }

    let json = tmp.path().join("report.json");
    let out = bin(&[
        "eval",
        "--trajectory",
        s(&track.join("trajectory.jsonl")),
        "--gt",
        s(&frames.join("gt.jsonl")),
        "--json",
        s(&json),
    ]);
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("no. of tracking losses"), "{text}");
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(v["robustness"]["num_losses"]["mean"], 1.0);
    assert_eq!(v["robustness"]["longest_run"]["max"], 2.0);
    // The held pose of the lost frame lags one 3 mm orbit step.
    assert!(v["pose"]["translation_rmse_mm"].as_f64().unwrap() < 3.0);
    assert!(v["pose"]["rotation_rmse_deg"].as_f64().unwrap() < 2.5);
}

#[test]
fn threshold_segmentation_and_manual_camera() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let frames = tmp.path().join("frames");
    let track = tmp.path().join("track");
    ok(&bin(&["sim", "--config", &cfg, "--out", s(&frames)]));
    for k in 0..4 {
        fs::remove_file(frames.join(format!("seg_{k:04}.mha"))).unwrap();
    }
    ok(&bin(&[
        "track", "--config", &cfg, "--frames", s(&frames), "--out", s(&track), "--segmentation", "threshold", "--threshold", "120",
        "--camera", "manual", "--camera-distance", "20", "--view-angle", "80",
    ]));
    let traj = io::read_trajectory(&track.join("trajectory.jsonl")).unwrap();
    assert!(traj.iter().all(|r| r.status == TrackStatus::Tracked));
}

#[test]
fn external_segmentation_missing_counts_as_loss() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let frames = tmp.path().join("frames");
    let track = tmp.path().join("track");
    ok(&bin(&["sim", "--config", &cfg, "--out", s(&frames)]));
    fs::remove_file(frames.join("seg_0001.mha")).unwrap();
    ok(&bin(&["track", "--config", &cfg, "--frames", s(&frames), "--out", s(&track)]));
    let traj = io::read_trajectory(&track.join("trajectory.jsonl")).unwrap();
    assert_eq!(traj[1].status, TrackStatus::Lost);
    assert_eq!(traj.iter().filter(|r| r.status == TrackStatus::Lost).count(), 1);
}

#[test]
fn eval_reports_dice_for_seg_pairs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let frames = tmp.path().join("frames");
    ok(&bin(&["sim", "--config", &cfg, "--out", s(&frames)]));
    let pairs = tmp.path().join("pairs");
    fs::create_dir_all(pairs.join("pred")).unwrap();
    fs::create_dir_all(pairs.join("gt")).unwrap();
    for k in 0..2 {
        let name = format!("seg_{k:04}.mha");
        fs::copy(frames.join(&name), pairs.join("pred").join(&name)).unwrap();
        fs::copy(frames.join(&name), pairs.join("gt").join(&name)).unwrap();
    }
    let out = bin(&["eval", "--trajectory", s(&frames.join("gt.jsonl")), "--seg-pairs", s(&pairs)]);
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("1.0000(0.0000)"), "{text}");
}
