//! Pipeline commands behind the `echofusion` binary.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use echofusion::camera::build_camera;
use echofusion::compound::{fit_output_grid, orthogonal_slices, CompoundGrid};
use echofusion::config::PipelineConfig;
use echofusion::io::{self, TrajectoryRecord};
use echofusion::report::{DiceReport, EvalReport, PoseErrorReport, RobustnessReport};
use echofusion::sector::{estimate_camera_placement, sector_support, CameraPlacement};
use echofusion::sim::{generate_trajectory, render_frame, threshold_discriminator};
use echofusion::tracking::{robustness_metrics, LossReason, TrackStatus, Tracker};
use echofusion::types::{dice_score, SegmentationVolume, VoxelVolume};

pub const INTENSITY_PREFIX: &str = "intensity_";
pub const SEGMENTATION_PREFIX: &str = "seg_";
pub const GT_FILE: &str = "gt.jsonl";
pub const TRAJECTORY_FILE: &str = "trajectory.jsonl";
pub const MESH_FILE: &str = "mesh.ply";
pub const MODEL_STEM: &str = "model";

#[derive(Debug, Parser)]
#[command(name = "echofusion", version, about = "Segmentation-driven tracking and compounding for 3D ultrasound")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate phantom frames and a ground-truth trajectory.
    Sim(SimArgs),
    /// Track a frame sequence and fuse the surface model.
    Track(TrackArgs),
    /// Compound tracked intensity volumes.
    Fuse(FuseArgs),
    /// Report robustness, pose error and Dice statistics.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SimArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SegmentationSource {
    /// Read `seg_*.mha` next to each intensity volume.
    External,
    /// Threshold the intensity volume.
    Threshold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CameraMode {
    /// Place the camera from the detected sector.
    Auto,
    /// Use `--camera-distance` and `--view-angle` (or the config).
    Manual,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    #[arg(long)]
    pub frames: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SegmentationSource::External)]
    pub segmentation: SegmentationSource,
    /// Intensity threshold for `--segmentation threshold`.
    #[arg(long, default_value_t = 120.0)]
    pub threshold: f64,
    #[arg(long, value_enum, default_value_t = CameraMode::Auto)]
    pub camera: CameraMode,
    #[arg(long)]
    pub camera_distance: Option<f64>,
    #[arg(long)]
    pub view_angle: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub frames: PathBuf,
    #[arg(long)]
    pub trajectory: PathBuf,
    /// Output volume (`.mha` or `.mhd`); slices go next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// One trajectory per sequence; repeat for several.
    #[arg(long, required = true)]
    pub trajectory: Vec<PathBuf>,
    /// Ground truth for the first trajectory.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Directory with `pred/` and `gt/` holding same-named segmentations.
    #[arg(long)]
    pub seg_pairs: Option<PathBuf>,
    /// Also write the JSON report here.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Sim(a) => sim(&a),
        Command::Track(a) => track(&a).map(|_| ()),
        Command::Fuse(a) => fuse(&a),
        Command::Eval(a) => {
            let report = eval(&a)?;
            print!("{}", report.to_text());
            if a.json.is_none() {
                print!("\n{}", report.to_json());
            }
            Ok(())
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => Ok(PipelineConfig::load(p)?),
        None => Ok(PipelineConfig::default()),
    }
}

fn frame_name(prefix: &str, k: usize) -> String {
    format!("{prefix}{k:04}.mha")
}

pub fn sim(args: &SimArgs) -> Result<()> {
    let cfg = PipelineConfig::load(&args.config)?;
    let scene = cfg.scene.phantom();
    let poses = generate_trajectory(&cfg.trajectory, &scene)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut gt = Vec::with_capacity(poses.len());
    for (k, pose) in poses.iter().enumerate() {
        let f = render_frame(&scene, pose, &cfg.scene.fan, &cfg.scene.volume, &cfg.artifacts, cfg.scene.seed, k as u64)?;
        io::write_volume(&f.intensity, &args.out.join(frame_name(INTENSITY_PREFIX, k)))?;
        io::write_volume(f.segmentation.volume(), &args.out.join(frame_name(SEGMENTATION_PREFIX, k)))?;
        gt.push(TrajectoryRecord::from_pose(k, pose));
        info!("frame {k}: dropout {} shadow {}", f.artifacts.dropout, f.artifacts.shadow);
    }
    io::write_trajectory(&gt, &args.out.join(GT_FILE))?;
    Ok(())
}

/// Files in `dir` named `<prefix>*.mha`, in lexicographic order.
pub fn list_frames(dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with(prefix) && (n.ends_with(".mha") || n.ends_with(".mhd")))
        })
        .collect();
    out.sort();
    Ok(out)
}

fn segmentation_path(intensity: &Path) -> PathBuf {
    let name = intensity.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    intensity.with_file_name(name.replacen(INTENSITY_PREFIX, SEGMENTATION_PREFIX, 1))
}

fn load_segmentation(intensity_path: &Path, args: &TrackArgs) -> Result<SegmentationVolume> {
    match args.segmentation {
        SegmentationSource::External => Ok(SegmentationVolume::new(io::read_volume(&segmentation_path(intensity_path))?)?),
        SegmentationSource::Threshold => Ok(threshold_discriminator(&io::read_volume(intensity_path)?, args.threshold)),
    }
}

fn placement(args: &TrackArgs, cfg: &PipelineConfig, first: &Path) -> Result<CameraPlacement> {
    let manual = |d: Option<f64>, a: Option<f64>| -> Result<CameraPlacement> {
        match (d, a) {
            (Some(d), Some(a)) => {
                let p = CameraPlacement::new(d, a);
                if !p.is_valid() {
                    bail!("invalid camera placement: distance {d} mm, view angle {a}°");
                }
                Ok(p)
            }
            _ => bail!("manual camera needs --camera-distance and --view-angle (or camera.distance_mm and camera.view_angle_deg)"),
        }
    };
    match args.camera {
        CameraMode::Manual => manual(args.camera_distance.or(cfg.camera.distance_mm), args.view_angle.or(cfg.camera.view_angle_deg)),
        CameraMode::Auto => {
            let vol = io::read_volume(first)?;
            let p = estimate_camera_placement(&vol, &cfg.sector).context("sector detection on the first frame")?;
            info!("camera from sector: distance {:.3} mm, view angle {:.3}°", p.distance, p.view_angle_deg);
            Ok(p)
        }
    }
}

/// Runs tracking and returns the per-frame records.
pub fn track(args: &TrackArgs) -> Result<Vec<TrajectoryRecord>> {
    let cfg = load_config(args.config.as_deref())?;
    let frames = list_frames(&args.frames, INTENSITY_PREFIX)?;
    if frames.is_empty() {
        bail!("no {INTENSITY_PREFIX}*.mha frames in {}", args.frames.display());
    }
    let place = placement(args, &cfg, &frames[0])?;
    let cam = build_camera(&place, cfg.camera.width, cfg.camera.height);
    let mut tracker = Tracker::new(cam, cfg.icp.clone(), cfg.tsdf.clone())?;
    for (k, path) in frames.iter().enumerate() {
        let r = match load_segmentation(path, args) {
            Ok(seg) => tracker.track_frame(&seg).unwrap_or_else(|e| tracker.record_loss(LossReason::InvalidFrame(e.to_string()))),
            Err(e) => tracker.record_loss(LossReason::InvalidFrame(format!("{e:#}"))),
        };
        if r.status == TrackStatus::Lost {
            warn!("frame {k} lost: {:?}", tracker.last_loss());
        } else {
            info!("frame {k}: inliers {:.3}, residual {:.4} mm", r.inlier_ratio, r.mean_residual);
        }
    }
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let records: Vec<TrajectoryRecord> = tracker.results().iter().enumerate().map(|(k, r)| TrajectoryRecord::from_result(k, r)).collect();
    io::write_trajectory(&records, &args.out.join(TRAJECTORY_FILE))?;
    match tracker.grid() {
        Some(grid) => {
            io::write_tsdf_snapshot(grid, &args.out.join(MODEL_STEM))?;
            io::write_ply(&grid.extract_mesh(), &args.out.join(MESH_FILE))?;
        }
        None => warn!("no frame was tracked; model and mesh not written"),
    }
    let m = robustness_metrics(tracker.results().iter().map(|r| r.status));
    info!("{} frames, {} losses, longest run {}", m.total_frames, m.num_losses, m.longest_run);
    Ok(records)
}

pub fn fuse(args: &FuseArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let frames = list_frames(&args.frames, INTENSITY_PREFIX)?;
    let records = io::read_trajectory(&args.trajectory)?;
    if records.len() != frames.len() {
        bail!("trajectory has {} records but {} frames were found", records.len(), frames.len());
    }
    let tracked: Vec<(VoxelVolume, echofusion::RigidPose)> = frames
        .iter()
        .zip(&records)
        .filter(|(_, r)| r.status == TrackStatus::Tracked)
        .map(|(p, r)| Ok((io::read_volume(p)?, r.pose())))
        .collect::<Result<_>>()?;
    let refs: Vec<(&VoxelVolume, echofusion::RigidPose)> = tracked.iter().map(|(v, p)| (v, *p)).collect();
    let grid = fit_output_grid(&refs, &cfg.compound)?;
    let mut acc = CompoundGrid::new(grid);
    for (vol, pose) in &refs {
        acc.add_frame(vol, &sector_support(vol, &cfg.sector), pose);
    }
    let out = acc.finish();
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    io::write_volume(&out, &args.out)?;
    io::write_slices(&orthogonal_slices(&out), &args.out.with_extension(""))?;
    info!("compounded {} of {} frames onto {:?}", refs.len(), frames.len(), grid.dims);
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<EvalReport> {
    let sequences: Vec<Vec<TrajectoryRecord>> = args.trajectory.iter().map(|p| io::read_trajectory(p)).collect::<Result<_, _>>()?;
    let robustness = RobustnessReport::from_sequences(
        sequences.iter().map(|s| robustness_metrics(s.iter().map(|r| r.status))).collect(),
    )
    .context("no trajectories")?;
    let pose = match &args.gt {
        Some(gt) => {
            let gt: Vec<_> = io::read_trajectory(gt)?.iter().map(TrajectoryRecord::pose).collect();
            let est: Vec<_> = sequences[0].iter().map(TrajectoryRecord::pose).collect();
            if gt.len() != est.len() {
                bail!("ground truth has {} frames, trajectory has {}", gt.len(), est.len());
            }
            PoseErrorReport::compare(&est, &gt)
        }
        None => None,
    };
    let dice = match &args.seg_pairs {
        Some(dir) => {
            let preds = list_frames(&dir.join("pred"), "")?;
            let mut scores = Vec::with_capacity(preds.len());
            for p in &preds {
                let g = dir.join("gt").join(p.file_name().expect("listed file"));
                let a = SegmentationVolume::new(io::read_volume(p)?)?;
                let b = SegmentationVolume::new(io::read_volume(&g).with_context(|| format!("missing ground truth for {}", p.display()))?)?;
                scores.push(dice_score(&a, &b)?);
            }
            DiceReport::from_scores(scores)
        }
        None => None,
    };
    let report = EvalReport { robustness, pose, dice };
    if let Some(path) = &args.json {
        fs::write(path, report.to_json()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(report)
}

/// Caps the global worker pool from `ECHOFUSION_THREADS`.
pub fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("ECHOFUSION_THREADS") {
        let n: usize = v.trim().parse().with_context(|| format!("ECHOFUSION_THREADS must be a positive integer, got '{v}'"))?;
        if n == 0 {
            bail!("ECHOFUSION_THREADS must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring worker pool")?;
    }
    Ok(())
}
