//! Synthetic ultrasound-like phantom: analytic shapes, probe trajectories,
//! fan-cropped intensity/segmentation volumes and simple artifacts.
//!
//! Random numbers come from ChaCha8 (`rand_chacha`), seeded with the
//! sequence seed and one stream per frame.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{GridGeometry, RigidPose, SegmentationVolume, Vec3, VolumeData, VolumeError, VoxelVolume};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("scene has no foreground primitive")]
    NoForeground,
    #[error("primitive {0} has a non-positive radius")]
    BadRadius(usize),
    #[error("probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("trajectory needs at least one frame")]
    NoFrames,
    #[error("negative trajectory bound")]
    NegativeBound,
    #[error("orbit with zero step bound cannot produce {0} distinct frames")]
    InfeasibleOrbit(usize),
    #[error("orbit axis passes through the probe; translation bound undefined")]
    DegenerateOrbit,
    #[error("random walk could not keep the target in view")]
    WalkStuck,
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Foreground,
    Background,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    Sphere { radius: f64 },
    Ellipsoid { radii: [f64; 3] },
    /// Segment from `center − half_axis` to `center + half_axis`, swept by
    /// `radius`.
    Capsule { half_axis: [f64; 3], radius: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Primitive {
    pub shape: Shape,
    pub center: [f64; 3],
    pub label: Label,
    pub intensity_mean: f64,
    #[serde(default)]
    pub intensity_std: f64,
}

impl Primitive {
    pub fn sdf(&self, p: Vec3) -> f64 {
        let q = p - Vec3::from(self.center);
        match &self.shape {
            Shape::Sphere { radius } => q.norm() - radius,
            Shape::Ellipsoid { radii } => ellipsoid_sdf(q, Vec3::from(*radii)),
            Shape::Capsule { half_axis, radius } => {
                let h = Vec3::from(*half_axis);
                let hh = h.norm_squared();
                let s = if hh > 0.0 { (q.dot(&h) / hh).clamp(-1.0, 1.0) } else { 0.0 };
                (q - h * s).norm() - radius
            }
        }
    }

    fn radii_ok(&self) -> bool {
        match &self.shape {
            Shape::Sphere { radius } => *radius > 0.0,
            Shape::Ellipsoid { radii } => radii.iter().all(|&r| r > 0.0),
            Shape::Capsule { radius, .. } => *radius > 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomScene {
    pub primitives: Vec<Primitive>,
    /// Soft tissue inside the fan but outside every primitive.
    pub background_mean: f64,
    pub background_std: f64,
}

impl Default for PhantomScene {
    /// "Fetal head" ellipsoid with two background-labelled limbs.
    fn default() -> Self {
        Self {
            primitives: vec![
                Primitive {
                    shape: Shape::Ellipsoid { radii: [45.0, 55.0, 45.0] },
                    center: [0.0, 95.0, 0.0],
                    label: Label::Foreground,
                    intensity_mean: 200.0,
                    intensity_std: 0.0,
                },
                Primitive {
                    shape: Shape::Capsule { half_axis: [12.0, 10.0, 0.0], radius: 7.0 },
                    center: [52.0, 120.0, 10.0],
                    label: Label::Background,
                    intensity_mean: 90.0,
                    intensity_std: 0.0,
                },
                Primitive {
                    shape: Shape::Capsule { half_axis: [-10.0, 12.0, 4.0], radius: 6.0 },
                    center: [-50.0, 125.0, -12.0],
                    label: Label::Background,
                    intensity_mean: 90.0,
                    intensity_std: 0.0,
                },
            ],
            background_mean: 40.0,
            background_std: 0.0,
        }
    }
}

impl PhantomScene {
    pub fn validate(&self) -> Result<(), SimError> {
        if !self.primitives.iter().any(|p| p.label == Label::Foreground) {
            return Err(SimError::NoForeground);
        }
        if let Some(i) = self.primitives.iter().position(|p| !p.radii_ok()) {
            return Err(SimError::BadRadius(i));
        }
        Ok(())
    }

    pub fn foreground(&self) -> impl Iterator<Item = &Primitive> {
        self.primitives.iter().filter(|p| p.label == Label::Foreground)
    }

    /// Mean of the foreground primitive centres.
    pub fn centroid(&self) -> Vec3 {
        let (sum, n) = self.foreground().fold((Vec3::zeros(), 0usize), |(s, n), p| (s + Vec3::from(p.center), n + 1));
        if n == 0 {
            Vec3::zeros()
        } else {
            sum / n as f64
        }
    }

    /// Midpoint between the background and the darkest foreground mean.
    pub fn default_threshold(&self) -> f64 {
        let fg = self.foreground().map(|p| p.intensity_mean).fold(f64::INFINITY, f64::min);
        0.5 * (self.background_mean + fg)
    }
}

/// Exact signed distance to the scene's foreground (negative inside).
pub fn scene_sdf(scene: &PhantomScene, p: Vec3) -> f64 {
    scene.foreground().map(|s| s.sdf(p)).fold(f64::INFINITY, f64::min)
}

/// Signed distance from `p` to the axis-aligned ellipsoid with semi-axes `r`
/// centred at the origin, by bisection on the closest-point parameter.
pub fn ellipsoid_sdf(p: Vec3, r: Vec3) -> f64 {
    // sort semi-axes descending; distance is invariant under the permutation
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| r[b].total_cmp(&r[a]));
    let e = [r[order[0]], r[order[1]], r[order[2]]];
    let y = [p[order[0]].abs(), p[order[1]].abs(), p[order[2]].abs()];
    let d = dist_ellipsoid(e, y);
    let inside = (p.x / r.x).powi(2) + (p.y / r.y).powi(2) + (p.z / r.z).powi(2) < 1.0;
    if inside {
        -d
    } else {
        d
    }
}

fn robust_len(v: &[f64]) -> f64 {
    let m = v.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    if m == 0.0 {
        return 0.0;
    }
    m * v.iter().map(|x| (x / m).powi(2)).sum::<f64>().sqrt()
}

fn bisect(mut s0: f64, mut s1: f64, g: impl Fn(f64) -> f64) -> f64 {
    let mut s = 0.5 * (s0 + s1);
    for _ in 0..1100 {
        s = 0.5 * (s0 + s1);
        if s == s0 || s == s1 {
            break;
        }
        let v = g(s);
        if v > 0.0 {
            s0 = s;
        } else if v < 0.0 {
            s1 = s;
        } else {
            break;
        }
    }
    s
}

// e0 ≥ e1 > 0, y ≥ 0.
fn dist_ellipse(e: [f64; 2], y: [f64; 2]) -> f64 {
    if y[1] > 0.0 {
        if y[0] > 0.0 {
            let z = [y[0] / e[0], y[1] / e[1]];
            let g = z[0] * z[0] + z[1] * z[1] - 1.0;
            if g == 0.0 {
                return 0.0;
            }
            let r0 = (e[0] / e[1]).powi(2);
            let n0 = r0 * z[0];
            let s0 = z[1] - 1.0;
            let s1 = if g < 0.0 { 0.0 } else { robust_len(&[n0, z[1]]) - 1.0 };
            let s = bisect(s0, s1, |s| (n0 / (s + r0)).powi(2) + (z[1] / (s + 1.0)).powi(2) - 1.0);
            let x = [r0 * y[0] / (s + r0), y[1] / (s + 1.0)];
            ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2)).sqrt()
        } else {
            (y[1] - e[1]).abs()
        }
    } else {
        let numer = e[0] * y[0];
        let denom = e[0] * e[0] - e[1] * e[1];
        if numer < denom {
            let xd = numer / denom;
            let x = [e[0] * xd, e[1] * (1.0 - xd * xd).sqrt()];
            ((x[0] - y[0]).powi(2) + x[1] * x[1]).sqrt()
        } else {
            (y[0] - e[0]).abs()
        }
    }
}

// e0 ≥ e1 ≥ e2 > 0, y ≥ 0.
fn dist_ellipsoid(e: [f64; 3], y: [f64; 3]) -> f64 {
    if y[2] > 0.0 {
        if y[1] > 0.0 {
            if y[0] > 0.0 {
                let z = [y[0] / e[0], y[1] / e[1], y[2] / e[2]];
                let g = z.iter().map(|v| v * v).sum::<f64>() - 1.0;
                if g == 0.0 {
                    return 0.0;
                }
                let r0 = (e[0] / e[2]).powi(2);
                let r1 = (e[1] / e[2]).powi(2);
                let (n0, n1) = (r0 * z[0], r1 * z[1]);
                let s0 = z[2] - 1.0;
                let s1 = if g < 0.0 { 0.0 } else { robust_len(&[n0, n1, z[2]]) - 1.0 };
                let s = bisect(s0, s1, |s| {
                    (n0 / (s + r0)).powi(2) + (n1 / (s + r1)).powi(2) + (z[2] / (s + 1.0)).powi(2) - 1.0
                });
                let x = [r0 * y[0] / (s + r0), r1 * y[1] / (s + r1), y[2] / (s + 1.0)];
                (0..3).map(|i| (x[i] - y[i]).powi(2)).sum::<f64>().sqrt()
            } else {
                dist_ellipse([e[1], e[2]], [y[1], y[2]])
            }
        } else if y[0] > 0.0 {
            dist_ellipse([e[0], e[2]], [y[0], y[2]])
        } else {
            (y[2] - e[2]).abs()
        }
    } else {
        let d0 = e[0] * e[0] - e[2] * e[2];
        let d1 = e[1] * e[1] - e[2] * e[2];
        let (n0, n1) = (e[0] * y[0], e[1] * y[1]);
        if n0 < d0 && n1 < d1 {
            let (a, b) = (n0 / d0, n1 / d1);
            let disc = 1.0 - a * a - b * b;
            if disc > 0.0 {
                let x = [e[0] * a, e[1] * b, e[2] * disc.sqrt()];
                return ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2) + x[2] * x[2]).sqrt();
            }
        }
        dist_ellipse([e[0], e[1]], [y[0], y[1]])
    }
}

/// Fan-shaped acquisition support in the probe frame. Each central plane
/// is a wedge with its own apex on the `−y` axis; the far boundary is an
/// arc of radius `range_mm` around the closer apex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FanSpec {
    pub apex_depth_xy_mm: f64,
    pub apex_depth_yz_mm: f64,
    pub angle_xy_deg: f64,
    pub angle_yz_deg: f64,
    pub range_mm: f64,
}

impl Default for FanSpec {
    fn default() -> Self {
        Self {
            apex_depth_xy_mm: 20.0,
            apex_depth_yz_mm: 20.0,
            angle_xy_deg: 80.0,
            angle_yz_deg: 75.0,
            range_mm: 180.0,
        }
    }
}

impl FanSpec {
    pub fn apex(&self) -> Vec3 {
        Vec3::new(0.0, -self.apex_depth_xy_mm.min(self.apex_depth_yz_mm), 0.0)
    }

    pub fn contains(&self, p: Vec3) -> bool {
        if p.y < 0.0 {
            return false;
        }
        let in_xy = p.x.abs().atan2(p.y + self.apex_depth_xy_mm).to_degrees() <= 0.5 * self.angle_xy_deg;
        let in_yz = p.z.abs().atan2(p.y + self.apex_depth_yz_mm).to_degrees() <= 0.5 * self.angle_yz_deg;
        in_xy && in_yz && (p - self.apex()).norm() <= self.range_mm
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VolumeSpec {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
}

impl Default for VolumeSpec {
    fn default() -> Self {
        Self { dims: [128; 3], spacing_mm: [1.25; 3] }
    }
}

impl VolumeSpec {
    pub fn geometry(&self) -> Result<GridGeometry, VolumeError> {
        GridGeometry::probe_centred(self.dims, self.spacing_mm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArtifactSpec {
    pub shadow_probability: f64,
    pub shadow_cone_deg: f64,
    pub dropout_probability: f64,
    pub speckle_std: f64,
    /// Frames that always drop out, independent of the probability.
    pub dropout_frames: Vec<usize>,
}

impl Default for ArtifactSpec {
    fn default() -> Self {
        Self {
            shadow_probability: 0.0,
            shadow_cone_deg: 15.0,
            dropout_probability: 0.0,
            speckle_std: 0.0,
            dropout_frames: Vec::new(),
        }
    }
}

impl ArtifactSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        for p in [self.shadow_probability, self.dropout_probability] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SimError::BadProbability(p));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryPattern {
    Orbit,
    Sweep,
    RandomWalk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectorySpec {
    pub frames: usize,
    pub rotation_bound_deg: f64,
    pub translation_bound_mm: f64,
    pub pattern: TrajectoryPattern,
    pub seed: u64,
    /// Orbit rotation axis or sweep direction.
    pub axis: [f64; 3],
    /// Random walk: largest angle between the beam axis and the target.
    pub max_view_offset_deg: f64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            frames: 30,
            rotation_bound_deg: 5.0,
            translation_bound_mm: 3.0,
            pattern: TrajectoryPattern::Orbit,
            seed: 7,
            axis: [0.0, 0.0, 1.0],
            max_view_offset_deg: 15.0,
        }
    }
}

/// Probe-to-world poses, the first being the identity.
///
/// Orbit steps rotate about `axis` through the scene centroid by the
/// largest angle that respects both the rotation bound and the translation
/// bound on the probe origin.
pub fn generate_trajectory(spec: &TrajectorySpec, scene: &PhantomScene) -> Result<Vec<RigidPose>, SimError> {
    if spec.frames == 0 {
        return Err(SimError::NoFrames);
    }
    if spec.rotation_bound_deg < 0.0 || spec.translation_bound_mm < 0.0 {
        return Err(SimError::NegativeBound);
    }
    let centre = scene.centroid();
    let axis = Vec3::from(spec.axis).try_normalize(1e-12).unwrap_or(Vec3::z());
    let n = spec.frames;
    match spec.pattern {
        TrajectoryPattern::Orbit => {
            let arm = -centre - axis * (-centre).dot(&axis);
            let radius = arm.norm();
            let rot = spec.rotation_bound_deg.to_radians();
            let step = if radius < 1e-9 {
                if spec.translation_bound_mm == 0.0 && n > 1 {
                    return Err(SimError::DegenerateOrbit);
                }
                rot
            } else {
                let chord = (spec.translation_bound_mm / (2.0 * radius)).min(1.0);
                rot.min(2.0 * chord.asin())
            };
            if step == 0.0 && n > 1 {
                return Err(SimError::InfeasibleOrbit(n));
            }
            Ok((0..n).map(|k| RigidPose::rotation_about(centre, axis, k as f64 * step)).collect())
        }
        TrajectoryPattern::Sweep => {
            Ok((0..n).map(|k| RigidPose::from_translation(axis * (k as f64 * spec.translation_bound_mm))).collect())
        }
        TrajectoryPattern::RandomWalk => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let mut poses = vec![RigidPose::identity()];
            let max_off = spec.max_view_offset_deg.to_radians().cos();
            while poses.len() < n {
                let prev = *poses.last().unwrap();
                let mut accepted = None;
                for _ in 0..1000 {
                    let dir: [f64; 3] = UnitSphere.sample(&mut rng);
                    let angle = rng.random_range(0.0..=1.0) * spec.rotation_bound_deg.to_radians();
                    let shift: [f64; 3] = UnitSphere.sample(&mut rng);
                    let shift = Vec3::from(shift) * rng.random_range(0.0..=1.0) * spec.translation_bound_mm;
                    let rot = RigidPose::rotation_about(centre, Vec3::from(dir), angle);
                    let cand = RigidPose::from_translation(shift).compose(&rot).compose(&prev).orthonormalized();
                    let moved = (cand.translation - prev.translation).norm();
                    if moved > spec.translation_bound_mm + 1e-9 {
                        continue;
                    }
                    let local = cand.inverse().transform_point(&centre);
                    if local.y > 0.0 && local.y / local.norm() >= max_off {
                        accepted = Some(cand);
                        break;
                    }
                }
                poses.push(accepted.ok_or(SimError::WalkStuck)?);
            }
            Ok(poses)
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameArtifacts {
    pub dropout: bool,
    pub shadow: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame {
    /// uint8 intensities; 0 outside the fan, at least 2 inside it.
    pub intensity: VoxelVolume,
    pub segmentation: SegmentationVolume,
    pub pose: RigidPose,
    pub artifacts: FrameArtifacts,
}

/// Smallest intensity inside the fan, so a threshold of 1 recovers the
/// support exactly.
pub const MIN_FAN_INTENSITY: f64 = 2.0;

#[derive(Clone, Copy, PartialEq)]
enum Tissue {
    Outside,
    Background,
    Primitive(usize),
}

/// Voxelizes the scene seen by a probe at `probe_pose` (probe-to-world).
/// `frame` selects the random stream, so frames rendered with the same
/// seed and index are bit-identical.
pub fn render_frame(
    scene: &PhantomScene,
    probe_pose: &RigidPose,
    fan: &FanSpec,
    vol: &VolumeSpec,
    artifacts: &ArtifactSpec,
    seed: u64,
    frame: u64,
) -> Result<RenderedFrame, SimError> {
    scene.validate()?;
    artifacts.validate()?;
    let geom = vol.geometry()?;
    let [nx, ny, nz] = geom.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame);

    let dropout = rng.random_bool(artifacts.dropout_probability) || artifacts.dropout_frames.contains(&(frame as usize));
    let shadow_draw = rng.random_bool(artifacts.shadow_probability);
    let shadow_dir = {
        let u: f64 = rng.random_range(-0.5..=0.5);
        let w: f64 = rng.random_range(-0.5..=0.5);
        let ax = (u * 0.8 * fan.angle_xy_deg).to_radians().tan();
        let az = (w * 0.8 * fan.angle_yz_deg).to_radians().tan();
        Vec3::new(ax, 1.0, az).normalize()
    };

    let tissue_at = |p_local: Vec3| -> (Tissue, bool) {
        if !fan.contains(p_local) {
            return (Tissue::Outside, false);
        }
        let q = probe_pose.transform_point(&p_local);
        let mut fg_hit = None;
        let mut bg_hit = None;
        for (i, prim) in scene.primitives.iter().enumerate() {
            if prim.sdf(q) < 0.0 {
                match prim.label {
                    Label::Foreground if fg_hit.is_none() => fg_hit = Some(i),
                    Label::Background if bg_hit.is_none() => bg_hit = Some(i),
                    _ => {}
                }
            }
        }
        match (fg_hit, bg_hit) {
            (Some(i), _) => (Tissue::Primitive(i), true),
            (None, Some(i)) => (Tissue::Primitive(i), false),
            _ => (Tissue::Background, false),
        }
    };

    let mut tissue = vec![Tissue::Outside; geom.voxel_count()];
    let mut seg = vec![0u8; geom.voxel_count()];
    tissue
        .par_chunks_mut(nx * ny)
        .zip(seg.par_chunks_mut(nx * ny))
        .enumerate()
        .for_each(|(k, (t, s))| {
            for j in 0..ny {
                for i in 0..nx {
                    let p = geom.voxel_to_world(Vec3::new(i as f64, j as f64, k as f64));
                    let (tt, fg) = tissue_at(p);
                    t[j * nx + i] = tt;
                    s[j * nx + i] = fg as u8;
                }
            }
        });

    // shadow: cone of zeros distal to the first foreground hit along a
    // random beam direction
    let mut shadow = false;
    if shadow_draw {
        let apex = fan.apex();
        let step = 0.5 * geom.min_spacing();
        let mut t = 0.0;
        while t < fan.range_mm {
            let p = apex + shadow_dir * t;
            let q = probe_pose.transform_point(&p);
            if fan.contains(p) && scene_sdf(scene, q) < 0.0 {
                break;
            }
            t += step;
        }
        if t < fan.range_mm {
            shadow = true;
            let cos_cone = (0.5 * artifacts.shadow_cone_deg).to_radians().cos();
            for k in 0..nz {
                for j in 0..ny {
                    for i in 0..nx {
                        let l = geom.linear_index(i, j, k);
                        if tissue[l] == Tissue::Outside {
                            continue;
                        }
                        let d = geom.voxel_to_world(Vec3::new(i as f64, j as f64, k as f64)) - apex;
                        let along = d.dot(&shadow_dir);
                        if along > t && along >= d.norm() * cos_cone {
                            tissue[l] = Tissue::Outside;
                            seg[l] = 0;
                        }
                    }
                }
            }
        }
    }

    let noise = |std: f64| Normal::new(0.0, std.max(0.0)).expect("finite std");
    let speckle = noise(artifacts.speckle_std);
    let mut data = vec![0u8; geom.voxel_count()];
    for (l, t) in tissue.iter().enumerate() {
        let (mean, std) = match *t {
            Tissue::Outside => continue,
            Tissue::Background => (scene.background_mean, scene.background_std),
            Tissue::Primitive(i) => {
                let p = &scene.primitives[i];
                if dropout && p.label == Label::Foreground {
                    (scene.background_mean, scene.background_std)
                } else {
                    (p.intensity_mean, p.intensity_std)
                }
            }
        };
        let mut v = mean + speckle.sample(&mut rng);
        if std > 0.0 {
            v += noise(std).sample(&mut rng);
        }
        data[l] = v.round().clamp(MIN_FAN_INTENSITY, 255.0) as u8;
    }
    if dropout {
        seg.fill(0);
    }

    Ok(RenderedFrame {
        intensity: VoxelVolume::new(geom, VolumeData::U8(data))?,
        segmentation: SegmentationVolume::from_mask(geom, seg)?,
        pose: *probe_pose,
        artifacts: FrameArtifacts { dropout, shadow },
    })
}

/// Stand-in discriminator: threshold, keep the largest 6-connected
/// component, then close with a 3×3×3 cube.
pub fn threshold_discriminator(intensity: &VoxelVolume, threshold: f64) -> SegmentationVolume {
    let geom = *intensity.geometry();
    let n = geom.voxel_count();
    let mask: Vec<bool> = (0..n).map(|i| intensity.data().get(i) > threshold).collect();
    let largest = largest_component(&mask, geom.dims);
    let closed = close_3d(&largest, geom.dims, 1);
    SegmentationVolume::from_mask(geom, closed.into_iter().map(u8::from).collect()).expect("binary mask")
}

fn largest_component(mask: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let [nx, ny, nz] = dims;
    let mut label = vec![0u32; mask.len()];
    let mut best = (0u32, 0usize);
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        queue.push_back(start);
        let mut size = 0usize;
        while let Some(l) = queue.pop_front() {
            size += 1;
            let (i, j, k) = (l % nx, (l / nx) % ny, l / (nx * ny));
            let mut visit = |m: usize| {
                if mask[m] && label[m] == 0 {
                    label[m] = next;
                    queue.push_back(m);
                }
            };
            if i > 0 {
                visit(l - 1);
            }
            if i + 1 < nx {
                visit(l + 1);
            }
            if j > 0 {
                visit(l - nx);
            }
            if j + 1 < ny {
                visit(l + nx);
            }
            if k > 0 {
                visit(l - nx * ny);
            }
            if k + 1 < nz {
                visit(l + nx * ny);
            }
        }
        if size > best.1 {
            best = (next, size);
        }
    }
    label.iter().map(|&l| best.1 > 0 && l == best.0).collect()
}

/// Binary closing with a `(2r+1)³` cube; outside the grid counts as
/// background.
pub(crate) fn close_3d(mask: &[bool], dims: [usize; 3], r: usize) -> Vec<bool> {
    if r == 0 {
        return mask.to_vec();
    }
    let pd = [dims[0] + 2 * r, dims[1] + 2 * r, dims[2] + 2 * r];
    let mut padded = vec![false; pd[0] * pd[1] * pd[2]];
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                padded[(i + r) + pd[0] * ((j + r) + pd[1] * (k + r))] = mask[i + dims[0] * (j + dims[1] * k)];
            }
        }
    }
    let dilated = cube_filter(&padded, pd, r, true);
    let closed = cube_filter(&dilated, pd, r, false);
    let mut out = vec![false; mask.len()];
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                out[i + dims[0] * (j + dims[1] * k)] = closed[(i + r) + pd[0] * ((j + r) + pd[1] * (k + r))];
            }
        }
    }
    out
}

fn cube_filter(src: &[bool], dims: [usize; 3], r: usize, dilate: bool) -> Vec<bool> {
    let strides = [1, dims[0], dims[0] * dims[1]];
    let mut cur = src.to_vec();
    for axis in 0..3 {
        let n = dims[axis];
        let s = strides[axis];
        let next: Vec<bool> = (0..cur.len())
            .into_par_iter()
            .map(|l| {
                let c = (l / s) % n;
                let lo = c.saturating_sub(r);
                let hi = (c + r).min(n - 1);
                let base = l - c * s;
                let mut acc = !dilate;
                for t in lo..=hi {
                    let v = cur[base + t * s];
                    if dilate {
                        acc |= v;
                    } else {
                        acc &= v;
                    }
                }
                acc
            })
            .collect();
        cur = next;
    }
    cur
}
