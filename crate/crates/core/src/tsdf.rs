//! Dense truncated signed distance grid: projective integration, raycast
//! prediction and marching-cubes extraction.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{clip_ray, CameraModel, DepthImage, VertexNormalMaps};
use crate::mc_tables::{CORNERS, EDGE_CONNECTION, TRIANGLE_CONNECTION};
use crate::types::{cell, GridGeometry, Vec3, VolumeError};

/// Smallest observed interpolation weight a raycast sample may rest on.
const RAYCAST_MIN_SUPPORT: f64 = 0.5;
/// Same, for the samples behind a raycast normal.
const NORMAL_MIN_SUPPORT: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsdfConfig {
    /// Voxels per axis.
    pub resolution: usize,
    /// Fixed voxel size; `None` fits the grid to the first frame.
    pub voxel_size_mm: Option<f64>,
    /// Fixed world position of voxel (0,0,0); `None` centres the grid on the
    /// first frame's foreground.
    pub origin_mm: Option<[f64; 3]>,
    /// Grid extent relative to the first frame's foreground bounding box.
    pub extent_scale: f64,
    pub truncation_voxels: f64,
    pub max_weight: f32,
    /// Raycast step as a fraction of the truncation distance per unit tsdf.
    pub raycast_step_factor: f64,
}

impl Default for TsdfConfig {
    fn default() -> Self {
        Self {
            resolution: 256,
            voxel_size_mm: None,
            origin_mm: None,
            extent_scale: 1.5,
            truncation_voxels: 4.0,
            max_weight: 64.0,
            raycast_step_factor: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsdfGrid {
    dims: [usize; 3],
    voxel_size: f64,
    origin: Vec3,
    truncation: f64,
    max_weight: f32,
    step_factor: f64,
    tsdf: Vec<f32>,
    weight: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<[f32; 3]>,
    pub normals: Vec<[f32; 3]>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn surface_area(&self) -> f64 {
        let v = |i: u32| {
            let p = self.vertices[i as usize];
            Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64)
        };
        self.triangles
            .iter()
            .map(|t| 0.5 * (v(t[1]) - v(t[0])).cross(&(v(t[2]) - v(t[0]))).norm())
            .sum()
    }
}

impl TsdfGrid {
    /// Unobserved grid: every weight 0, every tsdf 1.
    pub fn new(dims: [usize; 3], voxel_size: f64, origin: Vec3, truncation: f64, max_weight: f32) -> Result<Self, VolumeError> {
        GridGeometry::new(dims, [voxel_size; 3], origin.into())?;
        let n = dims[0] * dims[1] * dims[2];
        Ok(Self {
            dims,
            voxel_size,
            origin,
            truncation,
            max_weight,
            step_factor: 0.8,
            tsdf: vec![1.0; n],
            weight: vec![0.0; n],
        })
    }

    /// Cubic grid covering `scale` times the largest side of the box
    /// `[lo, hi]`, centred on it.
    pub fn fit_to_bounds(lo: Vec3, hi: Vec3, cfg: &TsdfConfig) -> Result<Self, VolumeError> {
        let n = cfg.resolution;
        let extent = (hi - lo).max() * cfg.extent_scale;
        let vs = cfg.voxel_size_mm.unwrap_or(extent / (n.max(2) - 1) as f64);
        let origin = match cfg.origin_mm {
            Some(o) => Vec3::from(o),
            None => (lo + hi) / 2.0 - Vec3::repeat((n as f64 - 1.0) / 2.0 * vs),
        };
        let mut g = Self::new([n; 3], vs, origin, cfg.truncation_voxels * vs, cfg.max_weight)?;
        g.step_factor = cfg.raycast_step_factor;
        Ok(g)
    }

    /// Grid whose every voxel holds `clamp(sdf/truncation)` with weight 1.
    pub fn from_sdf(
        dims: [usize; 3],
        voxel_size: f64,
        origin: Vec3,
        truncation: f64,
        sdf: impl Fn(Vec3) -> f64 + Sync,
    ) -> Result<Self, VolumeError> {
        let mut g = Self::new(dims, voxel_size, origin, truncation, 64.0)?;
        let geom = g.geometry();
        g.tsdf.par_iter_mut().enumerate().for_each(|(i, t)| {
            let p = geom.voxel_to_world(index_to_voxel(i, &dims));
            *t = (sdf(p) / truncation).clamp(-1.0, 1.0) as f32;
        });
        g.weight.fill(1.0);
        Ok(g)
    }

    pub fn geometry(&self) -> GridGeometry {
        GridGeometry {
            dims: self.dims,
            spacing: [self.voxel_size; 3],
            origin: self.origin.into(),
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    pub fn truncation(&self) -> f64 {
        self.truncation
    }

    pub fn max_weight(&self) -> f32 {
        self.max_weight
    }

    pub fn tsdf(&self) -> &[f32] {
        &self.tsdf
    }

    pub fn weights(&self) -> &[f32] {
        &self.weight
    }

    /// Rebuilds a grid from stored channels.
    pub fn from_parts(
        geometry: GridGeometry,
        truncation: f64,
        max_weight: f32,
        tsdf: Vec<f32>,
        weight: Vec<f32>,
    ) -> Result<Self, VolumeError> {
        let n = geometry.voxel_count();
        for len in [tsdf.len(), weight.len()] {
            if len != n {
                return Err(VolumeError::LengthMismatch { len, dims: geometry.dims });
            }
        }
        let mut g = Self::new(geometry.dims, geometry.spacing[0], Vec3::from(geometry.origin), truncation, max_weight)?;
        g.tsdf = tsdf;
        g.weight = weight;
        Ok(g)
    }

    pub fn observed_count(&self) -> usize {
        self.weight.iter().filter(|&&w| w > 0.0).count()
    }

    /// Fuses one depth frame seen from `cam.pose` (camera-to-world).
    pub fn integrate(&mut self, depth: &DepthImage, cam: &CameraModel) {
        let [nx, ny, _] = self.dims;
        let to_cam = cam.pose.inverse();
        let r = to_cam.rotation;
        let step_x = r.column(0) * self.voxel_size;
        let origin = self.origin;
        let vs = self.voxel_size;
        let trunc = self.truncation;
        let max_w = self.max_weight;
        let (w, h) = (depth.width as f64, depth.height as f64);

        self.tsdf
            .par_chunks_mut(nx * ny)
            .zip(self.weight.par_chunks_mut(nx * ny))
            .enumerate()
            .for_each(|(k, (ts, ws))| {
                for j in 0..ny {
                    let row_world = origin + Vec3::new(0.0, j as f64 * vs, k as f64 * vs);
                    let mut p = to_cam.transform_point(&row_world);
                    for i in 0..nx {
                        let pc = p;
                        p += step_x;
                        if pc.z <= 0.0 {
                            continue;
                        }
                        let u = (cam.fx * pc.x / pc.z + cam.cx).round();
                        let v = (cam.fy * pc.y / pc.z + cam.cy).round();
                        if u < 0.0 || v < 0.0 || u >= w || v >= h {
                            continue;
                        }
                        let d = depth.depth[v as usize * depth.width + u as usize];
                        if d <= 0.0 {
                            continue;
                        }
                        let sdf = d as f64 - pc.z;
                        if sdf < -trunc {
                            continue;
                        }
                        let obs = (sdf / trunc).clamp(-1.0, 1.0);
                        let idx = j * nx + i;
                        let w_old = ws[idx] as f64;
                        ts[idx] = ((ts[idx] as f64 * w_old + obs) / (w_old + 1.0)) as f32;
                        ws[idx] = (ws[idx] + 1.0).min(max_w);
                    }
                }
            });
    }

    /// Trilinear tsdf at a world point; `None` unless all eight corners are
    /// observed.
    pub fn sample(&self, p: Vec3) -> Option<f64> {
        self.sample_partial(p, 1.0)
    }

    /// Trilinear tsdf renormalized over the observed corners; `None` when
    /// their interpolation weights sum to less than `min_support`.
    fn sample_partial(&self, p: Vec3, min_support: f64) -> Option<f64> {
        let q = (p - self.origin) / self.voxel_size;
        let (x0, fx) = cell(q.x, self.dims[0])?;
        let (y0, fy) = cell(q.y, self.dims[1])?;
        let (z0, fz) = cell(q.z, self.dims[2])?;
        let sy = self.dims[0];
        let sz = self.dims[0] * self.dims[1];
        let base = x0 + sy * y0 + sz * z0;
        let offs = [0, 1, sy, sy + 1, sz, sz + 1, sz + sy, sz + sy + 1];
        let mut c = [0.0f64; 8];
        let mut complete = true;
        for (n, o) in offs.iter().enumerate() {
            complete &= self.weight[base + o] > 0.0;
            c[n] = self.tsdf[base + o] as f64;
        }
        if complete {
            let x00 = c[0] + (c[1] - c[0]) * fx;
            let x10 = c[2] + (c[3] - c[2]) * fx;
            let x01 = c[4] + (c[5] - c[4]) * fx;
            let x11 = c[6] + (c[7] - c[6]) * fx;
            let y0v = x00 + (x10 - x00) * fy;
            let y1v = x01 + (x11 - x01) * fy;
            return Some(y0v + (y1v - y0v) * fz);
        }
        if min_support >= 1.0 {
            return None;
        }
        let (mut sum, mut support) = (0.0, 0.0);
        for (n, o) in offs.iter().enumerate() {
            if self.weight[base + o] > 0.0 {
                let w = (if n & 1 == 1 { fx } else { 1.0 - fx })
                    * (if n & 2 == 2 { fy } else { 1.0 - fy })
                    * (if n & 4 == 4 { fz } else { 1.0 - fz });
                sum += w * c[n];
                support += w;
            }
        }
        (support >= min_support && support > 0.0).then(|| sum / support)
    }

    /// Unit tsdf gradient by central differences of trilinear samples.
    pub fn gradient(&self, p: Vec3) -> Option<Vec3> {
        self.gradient_partial(p, 1.0)
    }

    fn gradient_partial(&self, p: Vec3, min_support: f64) -> Option<Vec3> {
        let h = 0.5 * self.voxel_size;
        let mut g = Vec3::zeros();
        for a in 0..3 {
            let mut e = Vec3::zeros();
            e[a] = h;
            g[a] = self.sample_partial(p + e, min_support)? - self.sample_partial(p - e, min_support)?;
        }
        let n = g.norm();
        (n > 1e-12).then(|| g / n)
    }

    /// Surface prediction from `cam`: camera-frame vertices and normals at
    /// the first positive-to-negative tsdf crossing along each pixel ray.
    /// Samples near the edge of the observed region are renormalized over
    /// their observed corners, so silhouettes are predicted in full.
    pub fn raycast(&self, cam: &CameraModel) -> VertexNormalMaps {
        self.raycast_with(cam, RAYCAST_MIN_SUPPORT, NORMAL_MIN_SUPPORT)
    }

    /// Like [`TsdfGrid::raycast`], but only through cells whose eight
    /// corners are all observed.
    pub fn raycast_observed(&self, cam: &CameraModel) -> VertexNormalMaps {
        self.raycast_with(cam, 1.0, 1.0)
    }

    fn raycast_with(&self, cam: &CameraModel, sample_support: f64, normal_support: f64) -> VertexNormalMaps {
        let mut maps = VertexNormalMaps::invalid(cam.width, cam.height);
        let lo = self.origin;
        let hi = self.origin + Vec3::new(
            (self.dims[0] - 1) as f64,
            (self.dims[1] - 1) as f64,
            (self.dims[2] - 1) as f64,
        ) * self.voxel_size;
        let rot_t = cam.pose.rotation.transpose();
        let min_step = 0.5 * self.voxel_size;
        let skip = self.truncation;
        let per_unit = self.step_factor * self.truncation;

        let rows: Vec<Vec<Option<(Vec3, Vec3)>>> = (0..cam.height)
            .into_par_iter()
            .map(|v| {
                (0..cam.width)
                    .map(|u| {
                        let ray = cam.ray_direction(u as f64, v as f64);
                        let dir = cam.pose.rotation * ray;
                        let len = dir.norm();
                        let (t0, t1) = clip_ray(&cam.pose.translation, &dir, &lo, &hi, cam.near, cam.far)?;
                        let at = |t: f64| cam.pose.translation + dir * t;
                        let mut t = t0;
                        let mut prev: Option<(f64, f64)> = None;
                        while t <= t1 {
                            match self.sample_partial(at(t), sample_support) {
                                Some(f) => {
                                    if f < 0.0 {
                                        let (tp, fp) = prev?;
                                        let ts = tp + (t - tp) * fp / (fp - f);
                                        let n = self.gradient_partial(at(ts), normal_support)?;
                                        return Some((ray * ts, rot_t * n));
                                    }
                                    prev = Some((t, f));
                                    t += (f * per_unit).max(min_step) / len;
                                }
                                None => {
                                    prev = None;
                                    t += skip / len;
                                }
                            }
                        }
                        None
                    })
                    .collect()
            })
            .collect();
        for (v, row) in rows.into_iter().enumerate() {
            for (u, hit) in row.into_iter().enumerate() {
                if let Some((p, n)) = hit {
                    let i = v * cam.width + u;
                    maps.vertices[i] = p;
                    maps.normals[i] = n;
                    maps.valid[i] = true;
                }
            }
        }
        maps
    }

    /// Marching cubes on the zero level set over cubes whose eight corners
    /// are all observed.
    pub fn extract_mesh(&self) -> TriangleMesh {
        let [nx, ny, nz] = self.dims;
        let mut mesh = TriangleMesh::default();
        if nx < 2 || ny < 2 || nz < 2 {
            return mesh;
        }
        let idx = |i: usize, j: usize, k: usize| i + nx * (j + ny * k);
        // One edge vertex per (lower corner, axis), shared by neighbouring cubes.
        let mut edge_vertex: HashMap<(usize, u8), u32> = HashMap::new();
        let mut face_normals: Vec<Vec3> = Vec::new();

        for k in 0..nz - 1 {
            for j in 0..ny - 1 {
                for i in 0..nx - 1 {
                    let corner = |c: usize| {
                        let [dx, dy, dz] = CORNERS[c];
                        (i + dx, j + dy, k + dz)
                    };
                    let mut values = [0.0f64; 8];
                    let mut config = 0usize;
                    let mut observed = true;
                    for c in 0..8 {
                        let (a, b, d) = corner(c);
                        let l = idx(a, b, d);
                        if self.weight[l] <= 0.0 {
                            observed = false;
                            break;
                        }
                        values[c] = self.tsdf[l] as f64;
                        if values[c] < 0.0 {
                            config |= 1 << c;
                        }
                    }
                    if !observed || config == 0 || config == 255 {
                        continue;
                    }
                    let tri = &TRIANGLE_CONNECTION[config];
                    for t in tri.chunks(3) {
                        if t[0] < 0 {
                            break;
                        }
                        let mut ids = [0u32; 3];
                        for (slot, &e) in t.iter().enumerate() {
                            let [c0, c1] = EDGE_CONNECTION[e as usize];
                            let (p0, p1) = (corner(c0), corner(c1));
                            let (lo_c, axis) = edge_key(p0, p1);
                            let key = (idx(lo_c.0, lo_c.1, lo_c.2), axis);
                            let id = *edge_vertex.entry(key).or_insert_with(|| {
                                let (f0, f1) = (values[c0], values[c1]);
                                let s = f0 / (f0 - f1);
                                let a = Vec3::new(p0.0 as f64, p0.1 as f64, p0.2 as f64);
                                let b = Vec3::new(p1.0 as f64, p1.1 as f64, p1.2 as f64);
                                let p = self.origin + (a + (b - a) * s) * self.voxel_size;
                                mesh.vertices.push([p.x as f32, p.y as f32, p.z as f32]);
                                face_normals.push(Vec3::zeros());
                                (mesh.vertices.len() - 1) as u32
                            });
                            ids[slot] = id;
                        }
                        if ids[0] == ids[1] || ids[1] == ids[2] || ids[0] == ids[2] {
                            continue;
                        }
                        // the table winds triangles with normals facing negative values
                        let ids = [ids[0], ids[2], ids[1]];
                        let v = |n: u32| {
                            let p = mesh.vertices[n as usize];
                            Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64)
                        };
                        let fnrm = (v(ids[1]) - v(ids[0])).cross(&(v(ids[2]) - v(ids[0])));
                        for &n in &ids {
                            face_normals[n as usize] += fnrm;
                        }
                        mesh.triangles.push(ids);
                    }
                }
            }
        }

        mesh.normals = mesh
            .vertices
            .par_iter()
            .zip(face_normals.par_iter())
            .map(|(p, fallback)| {
                let p = Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64);
                let n = self
                    .gradient(p)
                    .or_else(|| (fallback.norm() > 1e-12).then(|| fallback.normalize()))
                    .unwrap_or(Vec3::z());
                [n.x as f32, n.y as f32, n.z as f32]
            })
            .collect();
        mesh
    }
}

fn edge_key(a: (usize, usize, usize), b: (usize, usize, usize)) -> ((usize, usize, usize), u8) {
    let axis = if a.0 != b.0 {
        0
    } else if a.1 != b.1 {
        1
    } else {
        2
    };
    (if a <= b { a } else { b }, axis)
}

#[inline]
fn index_to_voxel(i: usize, dims: &[usize; 3]) -> Vec3 {
    let x = i % dims[0];
    let y = (i / dims[0]) % dims[1];
    let z = i / (dims[0] * dims[1]);
    Vec3::new(x as f64, y as f64, z as f64)
}
