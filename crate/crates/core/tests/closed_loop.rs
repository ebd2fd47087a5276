//! Short simulate-track-compound loops through the public API.

use echofusion::compound::{compound, fit_output_grid, CompoundConfig};
use echofusion::sim::{
    generate_trajectory, render_frame, threshold_discriminator, ArtifactSpec, FanSpec, Label, PhantomScene, Primitive, Shape,
    TrajectorySpec, VolumeSpec,
};
use echofusion::types::pose_difference;
use echofusion::{build_camera, estimate_camera_placement, IcpConfig, RigidPose, SectorConfig, TrackStatus, Tracker, TsdfConfig, VoxelVolume};

fn scene() -> PhantomScene {
    PhantomScene {
        primitives: vec![Primitive {
            shape: Shape::Ellipsoid { radii: [25.0, 55.0, 40.0] },
            center: [0.0, 95.0, 0.0],
            label: Label::Foreground,
            intensity_mean: 200.0,
            intensity_std: 0.0,
        }],
        ..PhantomScene::default()
    }
}

#[test]
fn short_orbit_is_tracked_and_compounded() {
    let scene = scene();
    let truth = generate_trajectory(&TrajectorySpec { frames: 6, ..TrajectorySpec::default() }, &scene).unwrap();
    let frames: Vec<_> = truth
        .iter()
        .enumerate()
        .map(|(k, p)| render_frame(&scene, p, &FanSpec::default(), &VolumeSpec::default(), &ArtifactSpec::default(), 2, k as u64).unwrap())
        .collect();

    let place = estimate_camera_placement(&frames[0].intensity, &SectorConfig::default()).unwrap();
    assert!((place.distance - 20.0).abs() < 2.0 && (place.view_angle_deg - 80.0).abs() < 2.0, "{place:?}");

    let cam = build_camera(&place, 480, 480);
    let mut tracker = Tracker::new(cam, IcpConfig::default(), TsdfConfig { resolution: 128, ..TsdfConfig::default() }).unwrap();
    for f in &frames {
        // the thresholded intensity is the segmentation a simple pipeline would use
        let seg = threshold_discriminator(&f.intensity, scene.default_threshold());
        assert_eq!(seg, f.segmentation);
        tracker.track_frame(&seg).unwrap();
    }
    let results = tracker.results();
    assert!(results.iter().all(|r| r.status == TrackStatus::Tracked));
    for (r, t) in results.iter().zip(&truth) {
        let (deg, mm) = pose_difference(&r.pose, t);
        assert!(deg < 2.0 && mm < 2.5, "{deg} deg, {mm} mm");
    }

    let inputs: Vec<(&VoxelVolume, RigidPose)> = frames.iter().zip(results).map(|(f, r)| (&f.intensity, r.pose)).collect();
    let grid = fit_output_grid(&inputs, &CompoundConfig::default()).unwrap();
    let acc = compound(&inputs, &grid, &SectorConfig::default()).unwrap();
    let out = acc.finish();
    assert!((out.max_value() - 200.0).abs() < 1.0, "{}", out.max_value());
    assert!(acc.support_count() > grid.voxel_count() / 4);
}

#[test]
fn dropout_frames_are_lost_and_not_fused() {
    let scene = scene();
    let truth = generate_trajectory(&TrajectorySpec { frames: 5, ..TrajectorySpec::default() }, &scene).unwrap();
    let artifacts = ArtifactSpec { dropout_frames: vec![1, 3], ..ArtifactSpec::default() };
    let cam = build_camera(&echofusion::CameraPlacement::new(20.0, 80.0), 160, 160);
    let mut tracker = Tracker::new(cam, IcpConfig::default(), TsdfConfig { resolution: 96, ..TsdfConfig::default() }).unwrap();
    let mut weights = Vec::new();
    for (k, p) in truth.iter().enumerate() {
        let f = render_frame(&scene, p, &FanSpec::default(), &VolumeSpec::default(), &artifacts, 3, k as u64).unwrap();
        assert_eq!(f.artifacts.dropout, k == 1 || k == 3);
        tracker.track_frame(&f.segmentation).unwrap();
        weights.push(tracker.grid().unwrap().weights().iter().map(|w| *w as f64).sum::<f64>());
    }
    let statuses: Vec<_> = tracker.results().iter().map(|r| r.status).collect();
    use TrackStatus::{Lost as L, Tracked as T};
    assert_eq!(statuses, [T, L, T, L, T]);
    assert_eq!(weights[0], weights[1]);
    assert_eq!(weights[2], weights[3]);
    assert!(weights[4] > weights[3]);
}
