//! Extended-field-of-view compounding of posed intensity volumes, plus the
//! three central slices used for display.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::Image2D;
use crate::sector::{sector_support, SectorConfig};
use crate::types::{cell, trilinear, GridGeometry, RigidPose, Vec3, VolumeData, VolumeError, VoxelVolume};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CompoundError {
    #[error("no frames to compound")]
    NoFrames,
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompoundConfig {
    /// Output spacing; `None` uses the finest input spacing.
    pub spacing_mm: Option<f64>,
    pub margin_mm: f64,
}

impl Default for CompoundConfig {
    fn default() -> Self {
        Self { spacing_mm: None, margin_mm: 0.0 }
    }
}

/// Running weighted sum over an output lattice.
#[derive(Debug, Clone)]
pub struct CompoundGrid {
    geometry: GridGeometry,
    sum: Vec<f64>,
    weight: Vec<f32>,
}

impl CompoundGrid {
    pub fn new(geometry: GridGeometry) -> Self {
        let n = geometry.voxel_count();
        Self { geometry, sum: vec![0.0; n], weight: vec![0.0; n] }
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn weights(&self) -> &[f32] {
        &self.weight
    }

    pub fn support_count(&self) -> usize {
        self.weight.iter().filter(|&&w| w > 0.0).count()
    }

    /// Adds one frame. `pose` maps the frame's local coordinates to the
    /// output frame; samples count only where every interpolation corner
    /// with nonzero weight lies inside `support`.
    pub fn add_frame(&mut self, intensity: &VoxelVolume, support: &[bool], pose: &RigidPose) {
        let src = *intensity.geometry();
        assert_eq!(support.len(), src.voxel_count(), "support mask size");
        let to_local = pose.inverse();
        let g = self.geometry;
        let [nx, ny, _] = g.dims;
        let data = intensity.data();
        self.sum
            .par_chunks_mut(nx * ny)
            .zip(self.weight.par_chunks_mut(nx * ny))
            .enumerate()
            .for_each(|(k, (sum, weight))| {
                for j in 0..ny {
                    for i in 0..nx {
                        let p = g.voxel_to_world(Vec3::new(i as f64, j as f64, k as f64));
                        let idx = src.world_to_voxel(to_local.transform_point(&p));
                        if !all_corners(support, &src.dims, idx) {
                            continue;
                        }
                        let v = match data {
                            VolumeData::U8(d) => trilinear(d, &src.dims, idx),
                            VolumeData::I16(d) => trilinear(d, &src.dims, idx),
                            VolumeData::F32(d) => trilinear(d, &src.dims, idx),
                        };
                        if let Some(v) = v {
                            sum[j * nx + i] += v;
                            weight[j * nx + i] += 1.0;
                        }
                    }
                }
            });
    }

    /// Weighted mean as float32; unsupported voxels are 0.
    pub fn finish(&self) -> VoxelVolume {
        let data = self
            .sum
            .iter()
            .zip(&self.weight)
            .map(|(&s, &w)| if w > 0.0 { (s / w as f64) as f32 } else { 0.0 })
            .collect();
        VoxelVolume::new(self.geometry, VolumeData::F32(data)).expect("lattice matches payload")
    }
}

fn all_corners(support: &[bool], dims: &[usize; 3], idx: Vec3) -> bool {
    let (Some((x0, fx)), Some((y0, fy)), Some((z0, fz))) = (cell(idx.x, dims[0]), cell(idx.y, dims[1]), cell(idx.z, dims[2])) else {
        return false;
    };
    // corners with zero interpolation weight do not count
    let span = |c: usize, f: f64| (if f < 1.0 { c } else { c + 1 }, if f > 0.0 { c + 1 } else { c });
    let (xs, ys, zs) = (span(x0, fx), span(y0, fy), span(z0, fz));
    (zs.0..=zs.1).all(|z| (ys.0..=ys.1).all(|y| (xs.0..=xs.1).all(|x| support[x + dims[0] * (y + dims[1] * z)])))
}

/// Axis-aligned lattice enclosing every posed frame box.
pub fn fit_output_grid(frames: &[(&VoxelVolume, RigidPose)], cfg: &CompoundConfig) -> Result<GridGeometry, CompoundError> {
    let first = frames.first().ok_or(CompoundError::NoFrames)?;
    let spacing = cfg
        .spacing_mm
        .unwrap_or_else(|| frames.iter().map(|(v, _)| v.geometry().min_spacing()).fold(first.0.geometry().min_spacing(), f64::min));
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(VolumeError::BadSpacing([spacing; 3]).into());
    }
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for (vol, pose) in frames {
        let (a, b) = vol.geometry().bounds();
        for c in 0..8 {
            let p = Vec3::new(
                if c & 1 == 0 { a.x } else { b.x },
                if c & 2 == 0 { a.y } else { b.y },
                if c & 4 == 0 { a.z } else { b.z },
            );
            let q = pose.transform_point(&p);
            lo = lo.inf(&q);
            hi = hi.sup(&q);
        }
    }
    lo -= Vec3::repeat(cfg.margin_mm);
    hi += Vec3::repeat(cfg.margin_mm);
    let dims = [0, 1, 2].map(|a| ((hi[a] - lo[a]) / spacing).floor() as usize + 1);
    Ok(GridGeometry::new(dims, [spacing; 3], [lo.x, lo.y, lo.z])?)
}

/// Compounds posed frames onto `grid`, with each frame's sector support
/// taken from `sector`.
pub fn compound(frames: &[(&VoxelVolume, RigidPose)], grid: &GridGeometry, sector: &SectorConfig) -> Result<CompoundGrid, CompoundError> {
    if frames.is_empty() {
        return Err(CompoundError::NoFrames);
    }
    let mut acc = CompoundGrid::new(*grid);
    for (vol, pose) in frames {
        let support = sector_support(vol, sector);
        acc.add_frame(vol, &support, pose);
    }
    Ok(acc)
}

/// Central planes at `dims / 2`, min-max scaled to 8 bits over the volume.
///
/// Layouts: xy is `nx × ny` (x across, y down); yz is `nz × ny` (z across,
/// y down); xz is `nx × nz` (x across, z down).
pub fn orthogonal_slices(vol: &VoxelVolume) -> [Image2D<u8>; 3] {
    let [nx, ny, nz] = vol.dims();
    let (ci, cj, ck) = (nx / 2, ny / 2, nz / 2);
    let n = nx * ny * nz;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for l in 0..n {
        let v = vol.data().get(l);
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let scale = |v: f64| -> u8 {
        if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    };
    let at = |i: usize, j: usize, k: usize| scale(vol.get(i, j, k));
    [
        Image2D::from_fn(nx, ny, |i, j| at(i, j, ck)),
        Image2D::from_fn(nz, ny, |k, j| at(ci, j, k)),
        Image2D::from_fn(nx, nz, |i, k| at(i, cj, k)),
    ]
}
