//! Virtual pinhole camera placed at the sector apex, looking along `+y`.
//!
//! Camera frame: `+z` forward (world `+y` at the reference placement), `+x`
//! right (world `+x`), `+y` down (world `−z`). Depth values are camera-frame
//! `z` in millimetres; zero marks an invalid pixel.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::image::Image2D;
use crate::sector::CameraPlacement;
use crate::types::{trilinear, GridGeometry, Mat3, RigidPose, SegmentationVolume, Vec3, VoxelVolume};

/// Default depth/RGB image side length.
pub const DEFAULT_IMAGE_SIZE: usize = 480;
pub const DEFAULT_NEAR_MM: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Camera-to-world transform.
    pub pose: RigidPose,
    pub near: f64,
    pub far: f64,
}

/// Rotation taking camera axes to the probe frame: camera `z` → world `+y`,
/// camera `x` → world `+x`, camera `y` → world `−z`.
pub fn probe_looking_rotation() -> Mat3 {
    Mat3::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, -1.0, 0.0)
}

/// Focal length in pixels for an image `width` pixels wide spanning
/// `view_angle_deg`.
pub fn focal_length(width: usize, view_angle_deg: f64) -> f64 {
    // tan(a/2) = sin a / (1 + cos a)
    let a = view_angle_deg.to_radians();
    (width as f64 / 2.0) * (1.0 + a.cos()) / a.sin()
}

/// Camera at `(0, −distance, 0)` looking down `+y`. The wider view angle is
/// applied to both axes (`fx = fy`). `far` defaults to `distance + 1000`
/// mm; use [`CameraModel::with_far_for`] to fit it to a volume.
pub fn build_camera(placement: &CameraPlacement, width: usize, height: usize) -> CameraModel {
    let f = focal_length(width, placement.view_angle_deg);
    CameraModel {
        width,
        height,
        fx: f,
        fy: f,
        cx: (width as f64 - 1.0) / 2.0,
        cy: (height as f64 - 1.0) / 2.0,
        pose: RigidPose::new(probe_looking_rotation(), Vec3::new(0.0, -placement.distance, 0.0)),
        near: DEFAULT_NEAR_MM,
        far: placement.distance + 1000.0,
    }
}

impl CameraModel {
    /// Sets `far` to the camera distance from the origin plus the volume
    /// diagonal so every voxel is reachable.
    pub fn with_far_for(mut self, geometry: &GridGeometry) -> Self {
        self.far = self.pose.translation.norm() + geometry.diagonal();
        self
    }

    pub fn with_pose(mut self, pose: RigidPose) -> Self {
        self.pose = pose;
        self
    }

    #[inline]
    pub fn ray_direction(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Projects a camera-frame point to continuous pixel coordinates.
    #[inline]
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// Projects and rounds to the nearest in-image pixel.
    #[inline]
    pub fn project_to_pixel(&self, p: &Vec3) -> Option<(usize, usize)> {
        let (u, v) = self.project(p)?;
        let (u, v) = (u.round(), v.round());
        if u < 0.0 || v < 0.0 || u >= self.width as f64 || v >= self.height as f64 {
            None
        } else {
            Some((u as usize, v as usize))
        }
    }

    /// Half-resolution camera for the next pyramid level.
    pub fn downsampled(&self) -> CameraModel {
        CameraModel {
            width: self.width / 2,
            height: self.height / 2,
            fx: self.fx / 2.0,
            fy: self.fy / 2.0,
            cx: (self.cx + 0.5) / 2.0 - 0.5,
            cy: (self.cy + 0.5) / 2.0 - 0.5,
            ..*self
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    /// Row-major camera-frame `z` in mm; 0 = no hit.
    pub depth: Vec<f32>,
}

impl DepthImage {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, depth: vec![0.0; width * height] }
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f32 {
        self.depth[v * self.width + u]
    }

    pub fn valid_count(&self) -> usize {
        self.depth.iter().filter(|&&d| d > 0.0).count()
    }

    /// 2×2 block average over valid pixels within `max_jump` mm of the
    /// block's nearest depth.
    pub fn downsampled(&self, max_jump: f32) -> DepthImage {
        let (w, h) = (self.width / 2, self.height / 2);
        let mut out = DepthImage::zeros(w, h);
        for v in 0..h {
            for u in 0..w {
                let block = [
                    self.get(2 * u, 2 * v),
                    self.get(2 * u + 1, 2 * v),
                    self.get(2 * u, 2 * v + 1),
                    self.get(2 * u + 1, 2 * v + 1),
                ];
                let nearest = block.iter().copied().filter(|&d| d > 0.0).fold(f32::INFINITY, f32::min);
                if !nearest.is_finite() {
                    continue;
                }
                let (sum, n) = block
                    .iter()
                    .filter(|&&d| d > 0.0 && d - nearest <= max_jump)
                    .fold((0.0f32, 0u32), |(s, n), &d| (s + d, n + 1));
                out.depth[v * w + u] = sum / n as f32;
            }
        }
        out
    }
}

/// Per-pixel camera-frame vertices and unit normals.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexNormalMaps {
    pub width: usize,
    pub height: usize,
    pub vertices: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    pub valid: Vec<bool>,
}

impl VertexNormalMaps {
    pub fn invalid(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            vertices: vec![Vec3::zeros(); n],
            normals: vec![Vec3::zeros(); n],
            valid: vec![false; n],
        }
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Camera-frame `z` of every valid vertex, 0 elsewhere.
    pub fn to_depth(&self) -> DepthImage {
        DepthImage {
            width: self.width,
            height: self.height,
            depth: self
                .vertices
                .iter()
                .zip(&self.valid)
                .map(|(v, &ok)| if ok { v.z as f32 } else { 0.0 })
                .collect(),
        }
    }

    /// 2×2 pyramid step: a coarse pixel is valid only when all four fine
    /// pixels are valid and within `max_jump` mm in depth.
    pub fn downsampled(&self, max_jump: f64) -> VertexNormalMaps {
        let (w, h) = (self.width / 2, self.height / 2);
        let mut out = VertexNormalMaps::invalid(w, h);
        for v in 0..h {
            for u in 0..w {
                let idx = [
                    2 * v * self.width + 2 * u,
                    2 * v * self.width + 2 * u + 1,
                    (2 * v + 1) * self.width + 2 * u,
                    (2 * v + 1) * self.width + 2 * u + 1,
                ];
                if !idx.iter().all(|&i| self.valid[i]) {
                    continue;
                }
                let zs = idx.map(|i| self.vertices[i].z);
                let (lo, hi) = zs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &z| (a.min(z), b.max(z)));
                if hi - lo > max_jump {
                    continue;
                }
                let vsum: Vec3 = idx.iter().map(|&i| self.vertices[i]).sum();
                let nsum: Vec3 = idx.iter().map(|&i| self.normals[i]).sum();
                let n = nsum.norm();
                if n < 1e-9 {
                    continue;
                }
                let o = v * w + u;
                out.vertices[o] = vsum / 4.0;
                out.normals[o] = nsum / n;
                out.valid[o] = true;
            }
        }
        out
    }
}

/// Ray-marched depth of the first foreground crossing of a binary
/// segmentation.
///
/// Samples are spaced half the smallest voxel spacing apart; the labels are
/// trilinearly interpolated and a sample counts as foreground at ≥ 0.5. The
/// first crossing is refined with one bisection step.
pub fn render_depth(seg: &SegmentationVolume, cam: &CameraModel) -> DepthImage {
    let geom = *seg.geometry();
    let labels = seg.labels();
    let blocks = BlockOccupancy::new(labels, geom.dims);
    let step = 0.5 * geom.min_spacing();
    let (lo, hi) = geom.bounds();
    let origin = cam.pose.translation;
    let origin_vox = geom.world_to_voxel(origin);
    let rot = cam.pose.rotation;
    let fg = |p: Vec3| -> bool {
        let idx = geom.world_to_voxel(p);
        trilinear(labels, &geom.dims, idx).is_some_and(|v| v >= 0.5)
    };

    let mut depth = vec![0.0f32; cam.width * cam.height];
    depth.par_chunks_mut(cam.width).enumerate().for_each(|(v, row)| {
        for (u, out) in row.iter_mut().enumerate() {
            let dir = rot * cam.ray_direction(u as f64, v as f64);
            let dir_vox = Vec3::new(dir.x / geom.spacing[0], dir.y / geom.spacing[1], dir.z / geom.spacing[2]);
            let dt = step / dir.norm();
            let Some((t0, t1)) = clip_ray(&origin, &dir, &lo, &hi, cam.near, cam.far) else {
                continue;
            };
            // sample lattice anchored at `near` regardless of clipping
            let k0 = ((t0 - cam.near) / dt).ceil().max(0.0) as u64;
            let mut k = k0;
            let mut prev_t: Option<f64> = None;
            loop {
                let t = cam.near + k as f64 * dt;
                if t > t1 {
                    break;
                }
                // samples inside an empty block are background: jump past it
                if let Some(exit) = blocks.empty_block_exit(&origin_vox, &dir_vox, t) {
                    let next = (((exit - cam.near) / dt).ceil().max(0.0) as u64).max(k + 1);
                    prev_t = Some(cam.near + (next - 1) as f64 * dt);
                    k = next;
                    continue;
                }
                if fg(origin + dir * t) {
                    let hit = match prev_t {
                        Some(tp) => {
                            let mid = 0.5 * (tp + t);
                            if fg(origin + dir * mid) {
                                0.5 * (tp + mid)
                            } else {
                                0.5 * (mid + t)
                            }
                        }
                        None => t,
                    };
                    if hit > cam.near && hit < cam.far {
                        *out = hit as f32;
                    }
                    break;
                }
                prev_t = Some(t);
                k += 1;
            }
        }
    });
    DepthImage { width: cam.width, height: cam.height, depth }
}

const BLOCK: usize = 8;

/// Coarse occupancy: a block is empty when every voxel a trilinear sample
/// whose lower corner lies in the block can touch is background.
struct BlockOccupancy {
    nb: [usize; 3],
    occupied: Vec<bool>,
}

impl BlockOccupancy {
    fn new(labels: &[u8], dims: [usize; 3]) -> Self {
        let nb = dims.map(|d| d.div_ceil(BLOCK));
        let mut occupied = vec![false; nb[0] * nb[1] * nb[2]];
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    if labels[i + dims[0] * (j + dims[1] * k)] == 0 {
                        continue;
                    }
                    // a voxel on a block's lower face is also the upper
                    // corner of samples in the previous block
                    for bk in owners(k, nb[2]) {
                        for bj in owners(j, nb[1]) {
                            for bi in owners(i, nb[0]) {
                                occupied[bi + nb[0] * (bj + nb[1] * bk)] = true;
                            }
                        }
                    }
                }
            }
        }
        Self { nb, occupied }
    }

    /// Ray parameter where the ray leaves the empty block containing the
    /// sample at `t`; `None` if that block is occupied or out of range.
    #[inline]
    fn empty_block_exit(&self, o: &Vec3, d: &Vec3, t: f64) -> Option<f64> {
        let q = o + d * t;
        let mut b = [0usize; 3];
        for a in 0..3 {
            if q[a] < 0.0 {
                return None;
            }
            b[a] = ((q[a] / BLOCK as f64) as usize).min(self.nb[a] - 1);
        }
        if self.occupied[b[0] + self.nb[0] * (b[1] + self.nb[1] * b[2])] {
            return None;
        }
        let mut exit = f64::INFINITY;
        for a in 0..3 {
            if d[a] > 1e-15 {
                exit = exit.min((((b[a] + 1) * BLOCK) as f64 - o[a]) / d[a]);
            } else if d[a] < -1e-15 {
                exit = exit.min(((b[a] * BLOCK) as f64 - o[a]) / d[a]);
            }
        }
        Some(exit)
    }
}

fn owners(i: usize, nb: usize) -> impl Iterator<Item = usize> {
    let b = (i / BLOCK).min(nb - 1);
    let prev = (i.is_multiple_of(BLOCK) && b > 0).then(|| b - 1);
    std::iter::once(b).chain(prev)
}

/// Parameter interval in which `origin + t·dir` lies inside the box,
/// intersected with `[near, far]`.
pub(crate) fn clip_ray(origin: &Vec3, dir: &Vec3, lo: &Vec3, hi: &Vec3, near: f64, far: f64) -> Option<(f64, f64)> {
    let (mut t0, mut t1) = (near, far);
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if origin[a] < lo[a] || origin[a] > hi[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (mut ta, mut tb) = ((lo[a] - origin[a]) * inv, (hi[a] - origin[a]) * inv);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
        if t0 > t1 {
            return None;
        }
    }
    Some((t0, t1))
}

/// Grayscale view of the co-registered intensity volume: the intensity at
/// each pixel's depth hit, 0 where the depth is invalid.
pub fn render_intensity(intensity: &VoxelVolume, depth: &DepthImage, cam: &CameraModel) -> Image2D<f32> {
    Image2D::from_fn(cam.width, cam.height, |u, v| {
        let d = depth.get(u, v) as f64;
        if d <= 0.0 {
            return 0.0;
        }
        let p = cam.pose.transform_point(&(cam.ray_direction(u as f64, v as f64) * d));
        intensity.trilinear_sample(p).unwrap_or(0.0) as f32
    })
}

/// Edge-preserving depth smoothing. Invalid pixels stay invalid and never
/// contribute; neighbours further than `sigma_range_mm * 3` in depth are ignored.
pub fn bilateral_filter(depth: &DepthImage, radius: usize, sigma_space_px: f64, sigma_range_mm: f64) -> DepthImage {
    if radius == 0 {
        return depth.clone();
    }
    let (w, h) = (depth.width, depth.height);
    let r = radius as isize;
    let inv_s = -0.5 / (sigma_space_px * sigma_space_px);
    let inv_r = -0.5 / (sigma_range_mm * sigma_range_mm);
    let cutoff = 3.0 * sigma_range_mm;
    let spatial: Vec<f64> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| ((dx * dx + dy * dy) as f64 * inv_s).exp()))
        .collect();
    let mut out = vec![0.0f32; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(v, row)| {
        for (u, o) in row.iter_mut().enumerate() {
            let d0 = depth.depth[v * w + u];
            if d0 <= 0.0 {
                continue;
            }
            let d0 = d0 as f64;
            let (mut sum, mut wsum) = (0.0, 0.0);
            for dy in -r..=r {
                let y = v as isize + dy;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for dx in -r..=r {
                    let x = u as isize + dx;
                    if x < 0 || x >= w as isize {
                        continue;
                    }
                    let d = depth.depth[y as usize * w + x as usize] as f64;
                    if d <= 0.0 || (d - d0).abs() > cutoff {
                        continue;
                    }
                    let k = spatial[((dy + r) * (2 * r + 1) + dx + r) as usize] * ((d - d0) * (d - d0) * inv_r).exp();
                    sum += k * d;
                    wsum += k;
                }
            }
            *o = (sum / wsum) as f32;
        }
    });
    DepthImage { width: w, height: h, depth: out }
}

/// Back-projects depth to camera-frame vertices; normals from the cross
/// product of forward differences, oriented toward the camera.
pub fn compute_vertex_normal_maps(depth: &DepthImage, cam: &CameraModel) -> VertexNormalMaps {
    let (w, h) = (depth.width, depth.height);
    let mut maps = VertexNormalMaps::invalid(w, h);
    let vertex = |u: usize, v: usize| -> Option<Vec3> {
        let d = depth.get(u, v) as f64;
        (d > 0.0).then(|| cam.ray_direction(u as f64, v as f64) * d)
    };
    for v in 0..h {
        for u in 0..w {
            if let Some(p) = vertex(u, v) {
                maps.vertices[v * w + u] = p;
            }
        }
    }
    let rows: Vec<(Vec<Vec3>, Vec<bool>)> = (0..h)
        .into_par_iter()
        .map(|v| {
            let mut normals = vec![Vec3::zeros(); w];
            let mut valid = vec![false; w];
            if v + 1 < h {
                for u in 0..w.saturating_sub(1) {
                    let (Some(p), Some(pu), Some(pv)) = (vertex(u, v), vertex(u + 1, v), vertex(u, v + 1)) else {
                        continue;
                    };
                    let n = (pv - p).cross(&(pu - p));
                    let len = n.norm();
                    if len < 1e-12 {
                        continue;
                    }
                    let mut n = n / len;
                    if n.dot(&p) > 0.0 {
                        n = -n;
                    }
                    normals[u] = n;
                    valid[u] = true;
                }
            }
            (normals, valid)
        })
        .collect();
    for (v, (normals, valid)) in rows.into_iter().enumerate() {
        maps.normals[v * w..(v + 1) * w].copy_from_slice(&normals);
        maps.valid[v * w..(v + 1) * w].copy_from_slice(&valid);
    }
    for i in 0..w * h {
        if !maps.valid[i] {
            maps.vertices[i] = Vec3::zeros();
        }
    }
    maps
}

/// Camera settings read from configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    pub width: usize,
    pub height: usize,
    /// Manual placement; `None` means estimate from the sector.
    pub distance_mm: Option<f64>,
    pub view_angle_deg: Option<f64>,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            width: DEFAULT_IMAGE_SIZE,
            height: DEFAULT_IMAGE_SIZE,
            distance_mm: None,
            view_angle_deg: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::GridGeometry;

    fn seg_from(geom: GridGeometry, inside: impl Fn(Vec3) -> bool) -> SegmentationVolume {
        let mut mask = vec![0u8; geom.voxel_count()];
        for k in 0..geom.dims[2] {
            for j in 0..geom.dims[1] {
                for i in 0..geom.dims[0] {
                    if inside(geom.voxel_to_world(Vec3::new(i as f64, j as f64, k as f64))) {
                        mask[geom.linear_index(i, j, k)] = 1;
                    }
                }
            }
        }
        SegmentationVolume::from_mask(geom, mask).unwrap()
    }

    fn camera_at(distance: f64, angle: f64, size: usize) -> CameraModel {
        build_camera(&CameraPlacement::new(distance, angle), size, size)
    }

    #[test]
    fn focal_length_examples() {
        let c = camera_at(10.0, 90.0, 480);
        assert!((c.fx - 240.0).abs() < 1e-12);
        assert_eq!(c.fx, c.fy);
        assert_eq!(c.width, 480);
        let c = camera_at(10.0, 60.0, 480);
        assert!((c.fx - 415.692_193_816_530_5).abs() < 1e-9);
        assert_eq!(c.cx, 239.5);
    }

    #[test]
    fn camera_looks_down_positive_y() {
        let c = camera_at(20.0, 60.0, 64);
        let p = c.pose.transform_point(&Vec3::new(0.0, 0.0, 5.0));
        assert!((p - Vec3::new(0.0, -15.0, 0.0)).norm() < 1e-12);
        assert!(c.pose.is_valid(1e-12));
    }

    #[test]
    fn slab_depth() {
        let g = GridGeometry::probe_centred([64, 64, 64], [1.0; 3]).unwrap();
        let seg = seg_from(g, |p| p.y >= 30.0);
        let cam = camera_at(20.0, 60.0, 64).with_far_for(&g);
        let d = render_depth(&seg, &cam);
        let centre = d.get(32, 32) as f64;
        // trilinear 0.5 level sits half a voxel in front of the first row
        assert!((centre - 49.5).abs() <= 0.5, "{centre}");
    }

    #[test]
    fn empty_segmentation_renders_nothing() {
        let g = GridGeometry::probe_centred([16, 16, 16], [1.0; 3]).unwrap();
        let d = render_depth(&SegmentationVolume::empty(g), &camera_at(10.0, 60.0, 32));
        assert_eq!(d.valid_count(), 0);
    }

    fn ray_sphere_depth(cam: &CameraModel, centre: Vec3, radius: f64) -> DepthImage {
        let c = cam.pose.inverse().transform_point(&centre);
        let mut d = DepthImage::zeros(cam.width, cam.height);
        for v in 0..cam.height {
            for u in 0..cam.width {
                let r = cam.ray_direction(u as f64, v as f64);
                let (a, b, cc) = (r.dot(&r), -2.0 * r.dot(&c), c.dot(&c) - radius * radius);
                let disc = b * b - 4.0 * a * cc;
                if disc >= 0.0 {
                    d.depth[v * cam.width + u] = ((-b - disc.sqrt()) / (2.0 * a)) as f32;
                }
            }
        }
        d
    }

    #[test]
    fn sphere_depth_matches_ray_intersection() {
        let g = GridGeometry::probe_centred([64, 80, 64], [0.5; 3]).unwrap();
        let centre = Vec3::new(0.0, 20.0, 0.0);
        let seg = seg_from(g, |p| (p - centre).norm() <= 10.0);
        let cam = camera_at(20.0, 60.0, 120).with_far_for(&g);
        let d = render_depth(&seg, &cam);
        let exact = ray_sphere_depth(&cam, centre, 10.0);
        let mut compared = 0;
        for i in 0..d.depth.len() {
            let (a, b) = (d.depth[i] as f64, exact.depth[i] as f64);
            if a > 0.0 && b > 0.0 && b < 35.0 {
                // voxelised surface lies within one voxel of the sphere
                assert!((a - b).abs() <= 0.5, "pixel {i}: {a} vs {b}");
                compared += 1;
            }
        }
        assert!(compared > 500);
    }

    #[test]
    fn sphere_normals_match_analytic() {
        let centre = Vec3::new(0.0, 20.0, 0.0);
        let cam = camera_at(20.0, 60.0, 120);
        let d = ray_sphere_depth(&cam, centre, 10.0);
        let maps = compute_vertex_normal_maps(&d, &cam);
        let centre_cam = cam.pose.inverse().transform_point(&centre);
        let mut checked = 0;
        for i in 0..maps.valid.len() {
            if !maps.valid[i] {
                continue;
            }
            let analytic = (maps.vertices[i] - centre_cam).normalize();
            // stay away from the silhouette
            if analytic.z > -0.7 {
                continue;
            }
            let angle = maps.normals[i].dot(&analytic).clamp(-1.0, 1.0).acos().to_degrees();
            assert!(angle < 3.0, "pixel {i} normal off by {angle}");
            checked += 1;
        }
        assert!(checked > 1000);
    }

    #[test]
    fn fronto_parallel_normals_and_backprojection() {
        let cam = camera_at(10.0, 70.0, 40);
        let d = DepthImage { width: 40, height: 40, depth: vec![55.0; 1600] };
        let m = compute_vertex_normal_maps(&d, &cam);
        for i in 0..1600 {
            if m.valid[i] {
                assert!((m.normals[i] - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-6);
                let (u, v) = (i % 40, i / 40);
                let p = m.vertices[i];
                let x = p.z * (u as f64 - cam.cx) / cam.fx;
                assert!((x - p.x).abs() <= 1e-6 * p.x.abs().max(1.0));
                let _ = v;
            }
        }
        assert_eq!(m.valid_count(), 39 * 39);
        let none = compute_vertex_normal_maps(&DepthImage::zeros(8, 8), &cam);
        assert_eq!(none.valid_count(), 0);
    }

    #[test]
    fn finer_march_changes_depth_less_than_coarse_step() {
        let centre = Vec3::new(0.0, 20.0, 0.0);
        let coarse_g = GridGeometry::probe_centred([48, 60, 48], [1.0; 3]).unwrap();
        let coarse = seg_from(coarse_g, |p| (p - centre).norm() <= 12.0);
        let cam = camera_at(20.0, 60.0, 64).with_far_for(&coarse_g);
        let a = render_depth(&coarse, &cam);
        // same labels, half the march step: resample onto a lattice whose
        // min spacing is halved but whose trilinear field is identical
        // along x, y, z (scale z only so the field is unchanged)
        let b = {
            let geom = *coarse.geometry();
            let step = 0.25 * geom.min_spacing();
            let labels = coarse.labels();
            let mut out = DepthImage::zeros(cam.width, cam.height);
            for v in 0..cam.height {
                for u in 0..cam.width {
                    let dir = cam.pose.rotation * cam.ray_direction(u as f64, v as f64);
                    let dt = step / dir.norm();
                    let mut t = cam.near;
                    let mut prev = None;
                    while t < cam.far {
                        let p = cam.pose.translation + dir * t;
                        let f = trilinear(labels, &geom.dims, geom.world_to_voxel(p)).is_some_and(|x| x >= 0.5);
                        if f {
                            let tp: f64 = prev.unwrap_or(t);
                            out.depth[v * cam.width + u] = (0.5 * (tp + t)) as f32;
                            break;
                        }
                        prev = Some(t);
                        t += dt;
                    }
                }
            }
            out
        };
        for i in 0..a.depth.len() {
            if a.depth[i] > 0.0 && b.depth[i] > 0.0 {
                assert!((a.depth[i] - b.depth[i]).abs() < 0.5, "pixel {i}: {} vs {}", a.depth[i], b.depth[i]);
            }
        }
    }

    /// Plain march over the full sample lattice.
    fn reference_depth(seg: &SegmentationVolume, cam: &CameraModel) -> DepthImage {
        let geom = *seg.geometry();
        let step = 0.5 * geom.min_spacing();
        let fg = |p: Vec3| trilinear(seg.labels(), &geom.dims, geom.world_to_voxel(p)).is_some_and(|v| v >= 0.5);
        let mut out = DepthImage::zeros(cam.width, cam.height);
        for v in 0..cam.height {
            for u in 0..cam.width {
                let dir = cam.pose.rotation * cam.ray_direction(u as f64, v as f64);
                let dt = step / dir.norm();
                let mut prev: Option<f64> = None;
                let mut k = 0u64;
                loop {
                    let t = cam.near + k as f64 * dt;
                    if t >= cam.far {
                        break;
                    }
                    let p = cam.pose.translation + dir * t;
                    if fg(p) {
                        let hit = match prev {
                            Some(tp) => {
                                let mid = 0.5 * (tp + t);
                                if fg(cam.pose.translation + dir * mid) { 0.5 * (tp + mid) } else { 0.5 * (mid + t) }
                            }
                            None => t,
                        };
                        out.depth[v * cam.width + u] = hit as f32;
                        break;
                    }
                    prev = Some(t);
                    k += 1;
                }
            }
        }
        out
    }

    #[test]
    fn bilateral_filter_keeps_planes_and_edges() {
        let (w, h) = (20, 12);
        let mut d = DepthImage::zeros(w, h);
        for v in 0..h {
            for u in 0..w {
                d.depth[v * w + u] = match u {
                    0..=2 => 0.0,
                    3..=9 => 40.0 + 0.25 * u as f32 + 0.5 * v as f32,
                    _ => 80.0,
                };
            }
        }
        let f = bilateral_filter(&d, 3, 2.0, 2.0);
        for v in 0..h {
            for u in 0..w {
                let (a, b) = (d.depth[v * w + u], f.depth[v * w + u]);
                if u <= 2 {
                    assert_eq!(b, 0.0);
                } else if u >= 10 {
                    assert_eq!(b, 80.0);
                } else if (6..=6).contains(&u) && (3..h - 3).contains(&v) {
                    // symmetric window on a linear ramp
                    assert!((a - b).abs() < 1e-3, "{a} {b}");
                } else {
                    assert!((a - b).abs() < 1.0);
                }
            }
        }
        assert_eq!(bilateral_filter(&d, 0, 2.0, 2.0), d);
    }

    #[test]
    fn block_skipping_matches_full_march() {
        let g = GridGeometry::probe_centred([50, 70, 45], [1.0, 0.8, 1.2]).unwrap();
        let c1 = Vec3::new(-6.0, 30.0, 3.0);
        let c2 = Vec3::new(12.0, 45.0, -8.0);
        let seg = seg_from(g, |p| (p - c1).norm() <= 9.0 || (p - c2).component_div(&Vec3::new(4.0, 9.0, 3.0)).norm() <= 1.0);
        for pose in [
            RigidPose::identity(),
            RigidPose::rotation_about(Vec3::new(0.0, 35.0, 0.0), Vec3::new(1.0, 2.0, -1.0).normalize(), 0.7),
            RigidPose::rotation_about(Vec3::new(0.0, 35.0, 0.0), Vec3::z(), std::f64::consts::PI),
        ] {
            let base = camera_at(15.0, 75.0, 96).with_far_for(&g);
            let cam = base.with_pose(pose.compose(&base.pose));
            let fast = render_depth(&seg, &cam);
            assert!(fast.valid_count() > 200);
            assert_eq!(fast, reference_depth(&seg, &cam));
        }
    }

    #[test]
    fn downsampling_drops_invalid_and_far_pixels() {
        let d = DepthImage { width: 2, height: 2, depth: vec![10.0, 0.0, 11.0, 50.0] };
        let s = d.downsampled(5.0);
        assert_eq!(s.depth, vec![10.5]);
        let c = camera_at(10.0, 90.0, 480).downsampled();
        assert_eq!(c.width, 240);
        assert!((c.fx - 120.0).abs() < 1e-12);
        assert!((c.cx - 119.5).abs() < 1e-12);
    }
}
