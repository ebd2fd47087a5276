//! Frame-to-model tracking: each segmentation is rendered to depth, aligned
//! against a raycast of the fused model, and fused only if tracking holds.

use log::debug;
use serde::{Deserialize, Serialize};

use crate::camera::{bilateral_filter, compute_vertex_normal_maps, render_depth, CameraModel};
use crate::icp::{icp_align, IcpConfig, IcpError};
use crate::tsdf::{TsdfConfig, TsdfGrid};
use crate::types::{RigidPose, SegmentationVolume, Vec3, VolumeError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrackStatus {
    Tracked,
    Lost,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackResult {
    /// Probe frame to global frame; the global frame is the probe frame of
    /// the first tracked frame.
    pub pose: RigidPose,
    pub status: TrackStatus,
    pub inlier_ratio: f64,
    pub mean_residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RobustnessMetrics {
    pub total_frames: usize,
    pub num_losses: usize,
    pub longest_run: usize,
}

pub fn robustness_metrics(statuses: impl IntoIterator<Item = TrackStatus>) -> RobustnessMetrics {
    let mut m = RobustnessMetrics { total_frames: 0, num_losses: 0, longest_run: 0 };
    let mut run = 0;
    for s in statuses {
        m.total_frames += 1;
        match s {
            TrackStatus::Tracked => {
                run += 1;
                m.longest_run = m.longest_run.max(run);
            }
            TrackStatus::Lost => {
                m.num_losses += 1;
                run = 0;
            }
        }
    }
    m
}

/// Why a frame was lost.
#[derive(Debug, Clone, PartialEq)]
pub enum LossReason {
    EmptySegmentation,
    Alignment(IcpError),
    LowInlierRatio(f64),
    HighResidual(f64),
    /// The frame could not be read or did not match the sequence.
    InvalidFrame(String),
}

pub struct Tracker {
    camera: CameraModel,
    icp: IcpConfig,
    tsdf: TsdfConfig,
    grid: Option<TsdfGrid>,
    pose: RigidPose,
    results: Vec<TrackResult>,
    last_loss: Option<LossReason>,
}

impl Tracker {
    /// `camera.pose` is the camera-to-probe transform.
    pub fn new(camera: CameraModel, icp: IcpConfig, tsdf: TsdfConfig) -> Result<Self, IcpError> {
        icp.validate()?;
        Ok(Self {
            camera,
            icp,
            tsdf,
            grid: None,
            pose: RigidPose::identity(),
            results: Vec::new(),
            last_loss: None,
        })
    }

    pub fn camera(&self) -> &CameraModel {
        &self.camera
    }

    pub fn grid(&self) -> Option<&TsdfGrid> {
        self.grid.as_ref()
    }

    pub fn into_grid(self) -> Option<TsdfGrid> {
        self.grid
    }

    pub fn pose(&self) -> RigidPose {
        self.pose
    }

    pub fn results(&self) -> &[TrackResult] {
        &self.results
    }

    pub fn losses(&self) -> usize {
        self.results.iter().filter(|r| r.status == TrackStatus::Lost).count()
    }

    pub fn last_loss(&self) -> Option<&LossReason> {
        self.last_loss.as_ref()
    }

    fn lost(&mut self, reason: LossReason, inlier_ratio: f64, mean_residual: f64) -> TrackResult {
        debug!("frame {} lost: {reason:?}", self.results.len());
        self.last_loss = Some(reason);
        let r = TrackResult { pose: self.pose, status: TrackStatus::Lost, inlier_ratio, mean_residual };
        self.results.push(r);
        r
    }

    /// Records a frame that never reached alignment.
    pub fn record_loss(&mut self, reason: LossReason) -> TrackResult {
        self.lost(reason, 0.0, 0.0)
    }

    pub fn track_frame(&mut self, seg: &SegmentationVolume) -> Result<TrackResult, VolumeError> {
        let cam = self.camera.with_far_for(seg.geometry());
        if seg.is_empty() {
            return Ok(self.lost(LossReason::EmptySegmentation, 0.0, 0.0));
        }
        let depth = render_depth(seg, &cam);
        if depth.valid_count() == 0 {
            return Ok(self.lost(LossReason::EmptySegmentation, 0.0, 0.0));
        }

        let Some(grid) = self.grid.as_mut() else {
            let (lo, hi) = foreground_bounds(seg).expect("non-empty segmentation");
            let (lo, hi) = transformed_bounds(&self.pose, lo, hi);
            let mut grid = TsdfGrid::fit_to_bounds(lo, hi, &self.tsdf)?;
            grid.integrate(&depth, &cam.with_pose(self.pose.compose(&cam.pose)));
            self.grid = Some(grid);
            self.last_loss = None;
            let r = TrackResult { pose: self.pose, status: TrackStatus::Tracked, inlier_ratio: 1.0, mean_residual: 0.0 };
            self.results.push(r);
            return Ok(r);
        };

        let smoothed = bilateral_filter(
            &depth,
            self.icp.bilateral_radius_px,
            self.icp.bilateral_sigma_space_px,
            self.icp.bilateral_sigma_range_mm,
        );
        let src = compute_vertex_normal_maps(&smoothed, &cam);
        let prev_cam = self.pose.compose(&cam.pose);
        let model_cam = cam.with_pose(prev_cam).with_far_for(&grid.geometry());
        let dst = grid.raycast_observed(&model_cam);
        let out = match icp_align(&src, &dst, &model_cam, &prev_cam, &self.icp) {
            Ok(o) => o,
            Err(e) => return Ok(self.lost(LossReason::Alignment(e), 0.0, 0.0)),
        };
        if out.inlier_ratio < self.icp.min_inlier_ratio {
            return Ok(self.lost(LossReason::LowInlierRatio(out.inlier_ratio), out.inlier_ratio, out.mean_residual));
        }
        if out.mean_residual > self.icp.max_residual_mm {
            return Ok(self.lost(LossReason::HighResidual(out.mean_residual), out.inlier_ratio, out.mean_residual));
        }
        grid.integrate(&depth, &cam.with_pose(out.pose));
        self.pose = out.pose.compose(&cam.pose.inverse()).orthonormalized();
        self.last_loss = None;
        let r = TrackResult {
            pose: self.pose,
            status: TrackStatus::Tracked,
            inlier_ratio: out.inlier_ratio,
            mean_residual: out.mean_residual,
        };
        self.results.push(r);
        Ok(r)
    }
}

/// World-space bounding box of the foreground voxel centres.
pub fn foreground_bounds(seg: &SegmentationVolume) -> Option<(Vec3, Vec3)> {
    let g = seg.geometry();
    let [nx, ny, _] = g.dims;
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for (l, &v) in seg.labels().iter().enumerate() {
        if v == 0 {
            continue;
        }
        any = true;
        let idx = [l % nx, (l / nx) % ny, l / (nx * ny)];
        for a in 0..3 {
            lo[a] = lo[a].min(idx[a]);
            hi[a] = hi[a].max(idx[a]);
        }
    }
    any.then(|| {
        let f = |i: [usize; 3]| g.voxel_to_world(Vec3::new(i[0] as f64, i[1] as f64, i[2] as f64));
        (f(lo), f(hi))
    })
}

fn transformed_bounds(pose: &RigidPose, lo: Vec3, hi: Vec3) -> (Vec3, Vec3) {
    let mut a = Vec3::repeat(f64::INFINITY);
    let mut b = Vec3::repeat(f64::NEG_INFINITY);
    for c in 0..8 {
        let p = Vec3::new(
            if c & 1 == 0 { lo.x } else { hi.x },
            if c & 2 == 0 { lo.y } else { hi.y },
            if c & 4 == 0 { lo.z } else { hi.z },
        );
        let q = pose.transform_point(&p);
        a = a.inf(&q);
        b = b.sup(&q);
    }
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::build_camera;
    use crate::sector::CameraPlacement;
    use crate::sim::{render_frame, ArtifactSpec, FanSpec, PhantomScene, VolumeSpec};
    use TrackStatus::{Lost as L, Tracked as T};

    #[test]
    fn robustness_examples() {
        let m = robustness_metrics([T, T, L, T, T, T, L]);
        assert_eq!(m, RobustnessMetrics { total_frames: 7, num_losses: 2, longest_run: 3 });
        let m = robustness_metrics([T; 10]);
        assert_eq!(m, RobustnessMetrics { total_frames: 10, num_losses: 0, longest_run: 10 });
        assert_eq!(robustness_metrics([]), RobustnessMetrics { total_frames: 0, num_losses: 0, longest_run: 0 });
    }

    fn small_tracker() -> Tracker {
        let cam = build_camera(&CameraPlacement::new(20.0, 80.0), 480, 480);
        let tsdf = TsdfConfig { resolution: 128, ..TsdfConfig::default() };
        Tracker::new(cam, IcpConfig::default(), tsdf).unwrap()
    }

    #[test]
    fn stationary_frames_do_not_drift_and_empty_frame_is_one_loss() {
        let scene = PhantomScene::default();
        let vol = VolumeSpec { dims: [80; 3], spacing_mm: [2.0; 3] };
        let frame = render_frame(&scene, &RigidPose::identity(), &FanSpec::default(), &vol, &ArtifactSpec::default(), 1, 0).unwrap();
        let empty = SegmentationVolume::empty(*frame.segmentation.geometry());
        let mut tracker = small_tracker();
        for k in 0..10 {
            let seg = if k == 5 { &empty } else { &frame.segmentation };
            let before = tracker.grid().map(|g| g.weights().to_vec());
            let r = tracker.track_frame(seg).unwrap();
            if k == 5 {
                assert_eq!(r.status, TrackStatus::Lost);
                assert_eq!(tracker.last_loss(), Some(&LossReason::EmptySegmentation));
                // lost frames are never fused
                assert_eq!(tracker.grid().map(|g| g.weights().to_vec()), before);
            } else {
                assert_eq!(r.status, TrackStatus::Tracked, "frame {k}: {:?}", tracker.last_loss());
            }
            assert!(r.pose.translation.norm() < 0.1, "frame {k}: drift {}", r.pose.translation.norm());
            assert!(r.pose.rotation_angle().to_degrees() < 0.05);
        }
        let m = robustness_metrics(tracker.results().iter().map(|r| r.status));
        assert_eq!((m.num_losses, m.longest_run), (1, 5));
    }

    #[test]
    fn leading_empty_frames_are_lost_without_model() {
        let g = crate::types::GridGeometry::probe_centred([8; 3], [1.0; 3]).unwrap();
        let mut tracker = small_tracker();
        let r = tracker.track_frame(&SegmentationVolume::empty(g)).unwrap();
        assert_eq!(r.status, TrackStatus::Lost);
        assert!(tracker.grid().is_none());
        assert_eq!(r.pose, RigidPose::identity());
    }
}
