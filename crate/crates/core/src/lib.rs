//! EchoFusion: segmentation-driven dense tracking and compounding for 3D
//! ultrasound.
//!
//! A binary segmentation of each incoming volume is rendered to a depth
//! image by a virtual pinhole camera placed at the ultrasound sector apex.
//! Frames are tracked with point-to-plane ICP against a raycast of a TSDF
//! model. The tracked poses then drive compounding of the intensity volumes
//! into one extended field of view.
//!
//! A phantom simulator with exact ground truth, file I/O and evaluation
//! reports complete the pipeline.

pub mod camera;
pub mod compound;
pub mod config;
pub mod icp;
pub mod image;
pub mod io;
mod mc_tables;
pub mod report;
pub mod sector;
pub mod sim;
pub mod tracking;
pub mod tsdf;
pub mod types;

pub use camera::{build_camera, compute_vertex_normal_maps, render_depth, CameraModel, DepthImage, VertexNormalMaps};
pub use compound::{compound, orthogonal_slices, CompoundGrid};
pub use config::PipelineConfig;
pub use icp::{icp_align, IcpConfig, IcpOutcome};
pub use sector::{estimate_camera_placement, CameraPlacement, SectorConfig, SectorFit2D};
pub use tracking::{robustness_metrics, RobustnessMetrics, TrackResult, TrackStatus, Tracker};
pub use tsdf::{TriangleMesh, TsdfConfig, TsdfGrid};
pub use types::{dice_score, ElementKind, GridGeometry, Mat3, RigidPose, SegmentationVolume, Vec3, VolumeData, VoxelVolume};

/// Any library failure.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Volume(#[from] types::VolumeError),
    #[error(transparent)]
    Sector(#[from] sector::SectorError),
    #[error(transparent)]
    Icp(#[from] icp::IcpError),
    #[error(transparent)]
    Sim(#[from] sim::SimError),
    #[error(transparent)]
    Compound(#[from] compound::CompoundError),
    #[error(transparent)]
    Io(#[from] io::IoError),
    #[error(transparent)]
    Config(#[from] config::ConfigError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
