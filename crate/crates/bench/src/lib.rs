//! Shared fixtures for the kernel benchmarks.

use echofusion::sim::{render_frame, ArtifactSpec, FanSpec, Label, PhantomScene, Primitive, Shape, VolumeSpec};
use echofusion::{build_camera, CameraModel, CameraPlacement, RigidPose, SegmentationVolume, TsdfConfig, TsdfGrid, Vec3};

pub fn phantom() -> PhantomScene {
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

/// A 128³ segmentation of the phantom seen from `pose`.
pub fn segmentation(pose: &RigidPose) -> SegmentationVolume {
    render_frame(&phantom(), pose, &FanSpec::default(), &VolumeSpec::default(), &ArtifactSpec::default(), 1, 0)
        .expect("default scene renders")
        .segmentation
}

pub fn camera(size: usize) -> CameraModel {
    build_camera(&CameraPlacement::new(20.0, 80.0), size, size)
}

/// TSDF grid around the phantom at `resolution`³.
pub fn grid(resolution: usize) -> TsdfGrid {
    let (c, r) = (Vec3::new(0.0, 95.0, 0.0), Vec3::new(25.0, 55.0, 40.0));
    TsdfGrid::fit_to_bounds(c - r, c + r, &TsdfConfig { resolution, ..TsdfConfig::default() }).expect("valid grid")
}
