//! Point-to-plane ICP with projective association over an image pyramid.

use nalgebra::{Matrix6, SymmetricEigen, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{CameraModel, VertexNormalMaps};
use crate::types::{RigidPose, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcpConfig {
    pub pyramid_levels: usize,
    /// Iterations per level, coarse to fine.
    pub iterations_per_level: Vec<usize>,
    pub distance_gate_mm: f64,
    pub normal_gate_deg: f64,
    pub epsilon_translation_mm: f64,
    pub epsilon_rotation_rad: f64,
    pub min_inlier_pairs: usize,
    /// Eigenvalues below this fraction of the largest are treated as
    /// unconstrained directions.
    pub degeneracy_ratio: f64,
    /// Depth discontinuity (mm) that blocks pyramid averaging.
    pub pyramid_depth_jump_mm: f64,
    pub min_inlier_ratio: f64,
    pub max_residual_mm: f64,
    /// Bilateral pre-filter of the incoming depth; radius 0 disables it.
    pub bilateral_radius_px: usize,
    pub bilateral_sigma_space_px: f64,
    pub bilateral_sigma_range_mm: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            pyramid_levels: 3,
            iterations_per_level: vec![10, 5, 4],
            distance_gate_mm: 25.0,
            normal_gate_deg: 30.0,
            epsilon_translation_mm: 1e-4,
            epsilon_rotation_rad: 1e-6,
            min_inlier_pairs: 6,
            degeneracy_ratio: 1e-6,
            pyramid_depth_jump_mm: 10.0,
            min_inlier_ratio: 0.25,
            max_residual_mm: 10.0,
            bilateral_radius_px: 12,
            bilateral_sigma_space_px: 6.0,
            bilateral_sigma_range_mm: 3.0,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IcpError {
    #[error("invalid ICP configuration: {0}")]
    Config(String),
    #[error("too few inlier pairs: {found} < {required} at pyramid level {level}")]
    TooFewPairs { found: usize, required: usize, level: usize },
    #[error("singular point-to-plane system: rank {rank} at pyramid level {level}")]
    Singular { rank: usize, level: usize },
}

impl IcpConfig {
    pub fn validate(&self) -> Result<(), IcpError> {
        if self.pyramid_levels == 0 {
            return Err(IcpError::Config("pyramid_levels must be at least 1".into()));
        }
        if self.iterations_per_level.len() != self.pyramid_levels {
            return Err(IcpError::Config(format!(
                "iterations_per_level has {} entries for {} levels",
                self.iterations_per_level.len(),
                self.pyramid_levels
            )));
        }
        if !(self.distance_gate_mm > 0.0 && self.normal_gate_deg > 0.0) {
            return Err(IcpError::Config("gates must be positive".into()));
        }
        if self.bilateral_radius_px > 0 && !(self.bilateral_sigma_space_px > 0.0 && self.bilateral_sigma_range_mm > 0.0) {
            return Err(IcpError::Config("bilateral sigmas must be positive".into()));
        }
        Ok(())
    }
}

/// World-frame source point matched to a model point and normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub source: Vec3,
    pub target: Vec3,
    pub normal: Vec3,
}

impl Correspondence {
    #[inline]
    pub fn residual(&self) -> f64 {
        (self.source - self.target).dot(&self.normal)
    }
}

/// Linearized point-to-plane system for the twist `(ω, t)` applied as
/// `q ↦ q + ω×(q − pivot) + t`, rotation part scaled by `scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalEquations {
    pub jtj: Matrix6<f64>,
    pub jtr: Vector6<f64>,
    pub cost: f64,
    pub count: usize,
}

impl NormalEquations {
    fn zero() -> Self {
        Self { jtj: Matrix6::zeros(), jtr: Vector6::zeros(), cost: 0.0, count: 0 }
    }

    fn add(mut self, o: &Self) -> Self {
        self.jtj += o.jtj;
        self.jtr += o.jtr;
        self.cost += o.cost;
        self.count += o.count;
        self
    }
}

const REDUCTION_CHUNK: usize = 1024;

/// Builds `JᵀJ` and `Jᵀr` with `J = [(q − pivot)×n / scale, n]`. Partial
/// sums over fixed-size chunks are added in order, so the result does not
/// depend on the thread count.
pub fn normal_equations(pairs: &[Correspondence], pivot: Vec3, scale: f64) -> NormalEquations {
    let partials: Vec<NormalEquations> = pairs
        .par_chunks(REDUCTION_CHUNK)
        .map(|chunk| {
            let mut acc = NormalEquations::zero();
            for c in chunk {
                let a = (c.source - pivot).cross(&c.normal) / scale;
                let j = Vector6::new(a.x, a.y, a.z, c.normal.x, c.normal.y, c.normal.z);
                let r = c.residual();
                acc.jtj += j * j.transpose();
                acc.jtr += j * r;
                acc.cost += r * r;
                acc.count += 1;
            }
            acc
        })
        .collect();
    partials.iter().fold(NormalEquations::zero(), |a, b| a.add(b))
}

/// Sum of squared point-to-plane residuals after applying the twist
/// `xi = (ω, t)` about `pivot` to every source point.
pub fn point_to_plane_cost(pairs: &[Correspondence], xi: &Vector6<f64>, pivot: Vec3) -> f64 {
    let delta = twist_pose(xi, pivot);
    pairs
        .iter()
        .map(|c| {
            let q = delta.transform_point(&c.source);
            ((q - c.target).dot(&c.normal)).powi(2)
        })
        .sum()
}

/// Rigid motion `q ↦ exp(ω)(q − pivot) + pivot + t`.
pub fn twist_pose(xi: &Vector6<f64>, pivot: Vec3) -> RigidPose {
    let omega = Vec3::new(xi[0], xi[1], xi[2]);
    let t = Vec3::new(xi[3], xi[4], xi[5]);
    let r = RigidPose::from_twist(omega, Vec3::zeros()).rotation;
    RigidPose::new(r, pivot - r * pivot + t)
}

/// Projective association: each valid source vertex is moved to world by
/// `pose`, projected into the model camera, and paired with that pixel's
/// vertex and normal if both gates pass.
pub fn associate(
    src: &VertexNormalMaps,
    dst: &VertexNormalMaps,
    dst_cam: &CameraModel,
    pose: &RigidPose,
    distance_gate: f64,
    normal_gate_deg: f64,
) -> Vec<Correspondence> {
    let to_dst = dst_cam.pose.inverse().compose(pose);
    let cos_gate = normal_gate_deg.to_radians().cos();
    let rows: Vec<Vec<Correspondence>> = (0..src.height)
        .into_par_iter()
        .map(|v| {
            let mut out = Vec::new();
            for u in 0..src.width {
                let i = v * src.width + u;
                if !src.valid[i] {
                    continue;
                }
                let p_d = to_dst.transform_point(&src.vertices[i]);
                let Some((du, dv)) = dst_cam.project_to_pixel(&p_d) else {
                    continue;
                };
                if du >= dst.width || dv >= dst.height {
                    continue;
                }
                let j = dv * dst.width + du;
                if !dst.valid[j] {
                    continue;
                }
                if (p_d - dst.vertices[j]).norm() > distance_gate {
                    continue;
                }
                let n_src = to_dst.transform_vector(&src.normals[i]);
                if n_src.dot(&dst.normals[j]) < cos_gate {
                    continue;
                }
                out.push(Correspondence {
                    source: pose.transform_point(&src.vertices[i]),
                    target: dst_cam.pose.transform_point(&dst.vertices[j]),
                    normal: dst_cam.pose.transform_vector(&dst.normals[j]),
                });
            }
            out
        })
        .collect();
    rows.into_iter().flatten().collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpOutcome {
    /// Source camera-to-world pose.
    pub pose: RigidPose,
    pub inlier_ratio: f64,
    pub mean_residual: f64,
    /// Twist directions `(ω, t)` the data left unconstrained in the final
    /// solve; empty when the system had full rank.
    pub degenerate_directions: Vec<Vector6<f64>>,
}

impl IcpOutcome {
    pub fn is_degenerate(&self) -> bool {
        !self.degenerate_directions.is_empty()
    }
}

/// Solution of a scaled system with unconstrained eigen-directions frozen.
struct Step {
    xi: Vector6<f64>,
    rank: usize,
    null: Vec<Vector6<f64>>,
}

fn solve(eq: &NormalEquations, scale: f64, ratio: f64) -> Step {
    let eig = SymmetricEigen::new(eq.jtj);
    let lmax = eig.eigenvalues.iter().copied().fold(0.0f64, f64::max);
    let mut x = Vector6::zeros();
    let mut rank = 0;
    let mut null = Vec::new();
    for k in 0..6 {
        let l = eig.eigenvalues[k];
        let e = eig.eigenvectors.column(k).into_owned();
        if lmax > 0.0 && l > ratio * lmax {
            x -= e * (e.dot(&eq.jtr) / l);
            rank += 1;
        } else {
            let mut d = e;
            for a in 0..3 {
                d[a] /= scale;
            }
            null.push(d.normalize());
        }
    }
    for a in 0..3 {
        x[a] /= scale;
    }
    Step { xi: x, rank, null }
}

fn pyramid(maps: &VertexNormalMaps, levels: usize, jump: f64) -> Vec<VertexNormalMaps> {
    let mut out = vec![maps.clone()];
    for _ in 1..levels {
        let next = out.last().unwrap().downsampled(jump);
        out.push(next);
    }
    out
}

/// Estimates the source camera-to-world pose by minimizing
/// `Σ[(T·p_src − p_dst)·n_dst]²` coarse to fine, starting from `init`.
pub fn icp_align(
    src: &VertexNormalMaps,
    dst: &VertexNormalMaps,
    dst_cam: &CameraModel,
    init: &RigidPose,
    cfg: &IcpConfig,
) -> Result<IcpOutcome, IcpError> {
    cfg.validate()?;
    let src_pyr = pyramid(src, cfg.pyramid_levels, cfg.pyramid_depth_jump_mm);
    let dst_pyr = pyramid(dst, cfg.pyramid_levels, cfg.pyramid_depth_jump_mm);
    let mut cams = vec![*dst_cam];
    for _ in 1..cfg.pyramid_levels {
        let c = cams.last().unwrap().downsampled();
        cams.push(c);
    }

    let mut pose = *init;
    let mut null = Vec::new();
    for (step, &iters) in cfg.iterations_per_level.iter().enumerate() {
        let level = cfg.pyramid_levels - 1 - step;
        for _ in 0..iters {
            let pairs = associate(
                &src_pyr[level],
                &dst_pyr[level],
                &cams[level],
                &pose,
                cfg.distance_gate_mm,
                cfg.normal_gate_deg,
            );
            if pairs.len() < cfg.min_inlier_pairs {
                return Err(IcpError::TooFewPairs { found: pairs.len(), required: cfg.min_inlier_pairs, level });
            }
            let pivot = pairs.iter().map(|c| c.source).sum::<Vec3>() / pairs.len() as f64;
            let scale = (pairs.iter().map(|c| (c.source - pivot).norm_squared()).sum::<f64>() / pairs.len() as f64)
                .sqrt()
                .max(1e-6);
            let eq = normal_equations(&pairs, pivot, scale);
            let s = solve(&eq, scale, cfg.degeneracy_ratio);
            if s.rank < 3 {
                return Err(IcpError::Singular { rank: s.rank, level });
            }
            null = s.null;
            pose = twist_pose(&s.xi, pivot).compose(&pose).orthonormalized();
            let rot = Vec3::new(s.xi[0], s.xi[1], s.xi[2]).norm();
            let trans = Vec3::new(s.xi[3], s.xi[4], s.xi[5]).norm();
            if rot < cfg.epsilon_rotation_rad && trans < cfg.epsilon_translation_mm {
                break;
            }
        }
    }

    let pairs = associate(src, dst, dst_cam, &pose, cfg.distance_gate_mm, cfg.normal_gate_deg);
    let valid = src.valid_count();
    let inlier_ratio = if valid == 0 { 0.0 } else { pairs.len() as f64 / valid as f64 };
    let mean_residual = if pairs.is_empty() {
        0.0
    } else {
        pairs.iter().map(|c| c.residual().abs()).sum::<f64>() / pairs.len() as f64
    };
    Ok(IcpOutcome { pose, inlier_ratio, mean_residual, degenerate_directions: null })
}
