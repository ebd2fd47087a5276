use proptest::prelude::*;

use echofusion::camera::{build_camera, focal_length, DepthImage};
use echofusion::io::{self, TrajectoryRecord, DEPTH_SCALE};
use echofusion::tracking::{robustness_metrics, TrackStatus};
use echofusion::tsdf::{TriangleMesh, TsdfGrid};
use echofusion::types::{dice_score, pose_difference, GridGeometry, RigidPose, SegmentationVolume, Vec3};
use echofusion::CameraPlacement;

fn status_seq() -> impl Strategy<Value = Vec<bool>> {
    prop::collection::vec(any::<bool>(), 0..60)
}

fn vec3(r: f64) -> impl Strategy<Value = Vec3> {
    (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn pose() -> impl Strategy<Value = RigidPose> {
    (vec3(1.0), 0.0..3.0f64, vec3(100.0)).prop_map(|(axis, angle, t)| {
        RigidPose::from_translation(t).compose(&RigidPose::from_axis_angle(if axis.norm() < 1e-3 { Vec3::z() } else { axis }, angle))
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn robustness_matches_run_length_oracle(tracked in status_seq()) {
        let statuses: Vec<TrackStatus> = tracked.iter().map(|&t| if t { TrackStatus::Tracked } else { TrackStatus::Lost }).collect();
        let m = robustness_metrics(statuses.iter().copied());
        let text: String = tracked.iter().map(|&t| if t { 'T' } else { 'L' }).collect();
        let longest = text.split('L').map(str::len).max().unwrap_or(0);
        prop_assert_eq!(m.total_frames, tracked.len());
        prop_assert_eq!(m.num_losses, text.matches('L').count());
        prop_assert_eq!(m.longest_run, longest);
    }

    #[test]
    fn focal_length_is_positive_and_decreasing(a in 1.0..178.0f64, b in 1.0..178.0f64, w in 2usize..2000) {
        let (fa, fb) = (focal_length(w, a), focal_length(w, b));
        prop_assert!(fa > 0.0);
        if a < b {
            prop_assert!(fa > fb);
        }
        let oracle = (w as f64 / 2.0) / (a.to_radians() / 2.0).tan();
        prop_assert!((fa - oracle).abs() <= 1e-12 * oracle);
        let cam = build_camera(&CameraPlacement::new(10.0, a), w, w);
        prop_assert_eq!(cam.fx, cam.fy);
    }

    #[test]
    fn pose_inverse_and_difference(p in pose(), q in pose()) {
        let id = p.compose(&p.inverse());
        prop_assert!(pose_difference(&id, &RigidPose::identity()).0 < 1e-6);
        prop_assert!(pose_difference(&id, &RigidPose::identity()).1 < 1e-9);
        let (d1, t1) = pose_difference(&p, &q);
        let (d2, t2) = pose_difference(&q, &p);
        prop_assert!((d1 - d2).abs() < 1e-6 && (t1 - t2).abs() < 1e-9);
        prop_assert!(p.is_valid(1e-9));
    }

    #[test]
    fn dice_is_symmetric_and_bounded(a in prop::collection::vec(0u8..2, 64), b in prop::collection::vec(0u8..2, 64)) {
        let g = GridGeometry::new([4, 4, 4], [1.0; 3], [0.0; 3]).unwrap();
        let (sa, sb) = (SegmentationVolume::from_mask(g, a.clone()).unwrap(), SegmentationVolume::from_mask(g, b.clone()).unwrap());
        let d = dice_score(&sa, &sb).unwrap();
        prop_assert_eq!(d, dice_score(&sb, &sa).unwrap());
        prop_assert!((0.0..=1.0).contains(&d));
        let inter = a.iter().zip(&b).filter(|(x, y)| **x == 1 && **y == 1).count() as f64;
        let total = (a.iter().filter(|x| **x == 1).count() + b.iter().filter(|x| **x == 1).count()) as f64;
        if total > 0.0 {
            prop_assert!((d - 2.0 * inter / total).abs() < 1e-12);
        }
        if a.contains(&1) {
            prop_assert_eq!(dice_score(&sa, &sa).unwrap(), 1.0);
        }
    }

    #[test]
    fn tsdf_stays_clamped(depths in prop::collection::vec(prop::option::of(20.0..120.0f32), 3), passes in 1usize..80) {
        let cam = build_camera(&CameraPlacement::new(20.0, 60.0), 24, 24);
        let mut g = TsdfGrid::new([24; 3], 3.0, Vec3::new(-34.5, 0.0, -34.5), 9.0, 16.0).unwrap();
        for k in 0..passes {
            let d = depths[k % 3].unwrap_or(0.0);
            g.integrate(&DepthImage { width: 24, height: 24, depth: vec![d; 576] }, &cam);
        }
        prop_assert!(g.tsdf().iter().all(|t| (-1.0..=1.0).contains(t)));
        prop_assert!(g.weights().iter().all(|w| (0.0..=16.0).contains(w)));
    }

    #[test]
    fn depth_pgm_round_trips(w in 1usize..30, h in 1usize..30, seed in any::<u64>()) {
        let mut x = seed | 1;
        let depth: Vec<f32> = (0..w * h)
            .map(|_| {
                x ^= x << 13;
                x ^= x >> 7;
                x ^= x << 17;
                ((x % 65536) as f64 / DEPTH_SCALE) as f32
            })
            .collect();
        let img = DepthImage { width: w, height: h, depth };
        prop_assert_eq!(io::decode_depth_pgm(&io::encode_depth_pgm(&img)).unwrap(), img);
    }

    #[test]
    fn ply_round_trips(verts in prop::collection::vec(prop::array::uniform3(-1e4f32..1e4), 1..30), tri_seed in prop::collection::vec(any::<u32>(), 0..90)) {
        let n = verts.len() as u32;
        let triangles: Vec<[u32; 3]> = tri_seed.chunks_exact(3).map(|c| [c[0] % n, c[1] % n, c[2] % n]).collect();
        let normals = verts.iter().map(|v| [v[1], v[2], v[0]]).collect();
        let mesh = TriangleMesh { vertices: verts, normals, triangles };
        prop_assert_eq!(io::decode_ply(&io::encode_ply(&mesh)).unwrap(), mesh);
    }

    #[test]
    fn trajectory_round_trips(poses in prop::collection::vec(pose(), 1..12), ratio in 0.0..1.0f64) {
        let records: Vec<TrajectoryRecord> = poses
            .iter()
            .enumerate()
            .map(|(k, p)| {
                let mut r = TrajectoryRecord::from_pose(k, p);
                r.inlier_ratio = ratio / (k + 1) as f64;
                if k % 3 == 2 {
                    r.status = TrackStatus::Lost;
                }
                r
            })
            .collect();
        prop_assert_eq!(io::decode_trajectory(&io::encode_trajectory(&records)).unwrap(), records);
    }
}
