//! Ultrasound sector detection: mask → Canny edges → Hough flank lines →
//! apex and opening angle, measured on the two central slices of a volume.

use std::cmp::Ordering;
use std::collections::VecDeque;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{Image2D, Mask2D};
use crate::types::{VolumeData, VoxelVolume};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SectorError {
    #[error("no sector found")]
    NoSectorFound,
    #[error("sector lines not found")]
    SectorLinesNotFound,
    #[error("parallel flanks")]
    ParallelFlanks,
    #[error("sector apex at y = {apex_y:.3} mm is not behind the y = 0 plane")]
    ApexNotBehindOrigin { apex_y: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SectorConfig {
    /// Raw intensity above which a pixel belongs to the sector.
    pub threshold: f64,
    /// Side length of the square closing element, in pixels.
    pub closing_kernel: usize,
    pub canny_sigma: f64,
    /// Hysteresis thresholds as fractions of the maximum gradient magnitude.
    pub canny_low: f64,
    pub canny_high: f64,
    pub hough_angle_step_deg: f64,
    pub hough_offset_step_px: f64,
    pub hough_nms_angle_deg: f64,
    pub hough_nms_offset_px: f64,
    pub min_line_separation_deg: f64,
    /// Absolute vote floor for a Hough peak.
    pub hough_min_votes: u32,
    /// A second line must collect at least this fraction of the best line's
    /// votes.
    pub hough_vote_fraction: f64,
}

impl Default for SectorConfig {
    fn default() -> Self {
        Self {
            threshold: 1.0,
            closing_kernel: 5,
            canny_sigma: 1.4,
            canny_low: 0.1,
            canny_high: 0.3,
            hough_angle_step_deg: 0.5,
            hough_offset_step_px: 1.0,
            hough_nms_angle_deg: 5.0,
            hough_nms_offset_px: 5.0,
            min_line_separation_deg: 10.0,
            hough_min_votes: 10,
            hough_vote_fraction: 0.3,
        }
    }
}

/// Line in normal form `x·cos(θ) + y·sin(θ) = offset`, θ in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Line2D {
    pub angle_deg: f64,
    pub offset: f64,
}

impl Line2D {
    pub fn new(angle_deg: f64, offset: f64) -> Self {
        Self { angle_deg, offset }
    }

    /// Line through `point` whose direction makes `direction_deg` with the
    /// `+x` axis.
    pub fn through(point: [f64; 2], direction_deg: f64) -> Self {
        let normal = direction_deg + 90.0;
        let (s, c) = normal.to_radians().sin_cos();
        Self::new(normal, point[0] * c + point[1] * s)
    }

    fn normal(&self) -> [f64; 2] {
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        [c, s]
    }

    pub fn distance(&self, p: [f64; 2]) -> f64 {
        let [c, s] = self.normal();
        p[0] * c + p[1] * s - self.offset
    }

    /// Unit direction pointing toward increasing `y` (into the sector).
    fn inward_direction(&self) -> [f64; 2] {
        let [c, s] = self.normal();
        let d = [-s, c];
        if d[1] > 0.0 || (d[1] == 0.0 && d[0] > 0.0) {
            d
        } else {
            [-d[0], -d[1]]
        }
    }

    /// Re-expresses a line given in pixel coordinates in physical
    /// coordinates `X = origin + pixel·spacing`.
    pub fn to_physical(&self, origin: [f64; 2], spacing: [f64; 2]) -> Line2D {
        let [c, s] = self.normal();
        let a = c / spacing[0];
        let b = s / spacing[1];
        let rhs = self.offset + origin[0] * a + origin[1] * b;
        let n = a.hypot(b);
        Line2D::new(b.atan2(a).to_degrees(), rhs / n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SectorFit2D {
    /// Apex in physical in-slice coordinates (lateral, depth), mm.
    pub apex: [f64; 2],
    pub opening_angle_deg: f64,
    /// Flank lines in physical coordinates.
    pub lines: [Line2D; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPlacement {
    /// Apex distance behind the `y = 0` plane; the camera sits at
    /// `(0, −distance, 0)`.
    pub distance: f64,
    pub view_angle_deg: f64,
}

impl CameraPlacement {
    pub fn new(distance: f64, view_angle_deg: f64) -> Self {
        Self { distance, view_angle_deg }
    }

    pub fn is_valid(&self) -> bool {
        self.distance > 0.0 && self.view_angle_deg > 0.0 && self.view_angle_deg < 180.0
    }
}

/// Threshold, close, then fill any remaining enclosed holes.
pub fn extract_sector_mask(slice: &Image2D<f64>, cfg: &SectorConfig) -> Result<Mask2D, SectorError> {
    let raw = slice.map(|v| v > cfg.threshold);
    if raw.count() == 0 {
        return Err(SectorError::NoSectorFound);
    }
    Ok(raw.close(cfg.closing_kernel).fill_holes())
}

struct Gradients {
    edges: Mask2D,
    gx: Image2D<f64>,
    gy: Image2D<f64>,
    magnitude: Image2D<f64>,
}

fn gaussian_blur(img: &Image2D<f64>, sigma: f64) -> Image2D<f64> {
    if sigma <= 0.0 {
        return img.clone();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= sum);
    let (w, h) = (img.width(), img.height());
    let horizontal = Image2D::<f64>::from_fn(w, h, |x, y| {
        (-r..=r)
            .map(|d| kernel[(d + r) as usize] * img.get_clamped(x as isize + d, y as isize))
            .sum::<f64>()
    });
    Image2D::<f64>::from_fn(w, h, |x, y| {
        (-r..=r)
            .map(|d| kernel[(d + r) as usize] * horizontal.get_clamped(x as isize, y as isize + d))
            .sum::<f64>()
    })
}

fn canny(mask: &Mask2D, cfg: &SectorConfig) -> Gradients {
    let (w, h) = (mask.width(), mask.height());
    let smooth = gaussian_blur(&mask.map(|b| if b { 1.0 } else { 0.0 }), cfg.canny_sigma);
    let at = |x: usize, y: usize, dx: isize, dy: isize| smooth.get_clamped(x as isize + dx, y as isize + dy);
    let gx = Image2D::from_fn(w, h, |x, y| {
        (at(x, y, 1, -1) + 2.0 * at(x, y, 1, 0) + at(x, y, 1, 1))
            - (at(x, y, -1, -1) + 2.0 * at(x, y, -1, 0) + at(x, y, -1, 1))
    });
    let gy = Image2D::from_fn(w, h, |x, y| {
        (at(x, y, -1, 1) + 2.0 * at(x, y, 0, 1) + at(x, y, 1, 1))
            - (at(x, y, -1, -1) + 2.0 * at(x, y, 0, -1) + at(x, y, 1, -1))
    });
    let magnitude = Image2D::from_fn(w, h, |x, y| gx.get(x, y).hypot(gy.get(x, y)));
    let max = magnitude.data().iter().copied().fold(0.0, f64::max);
    let mut edges = Mask2D::filled(w, h, false);
    if max <= 1e-12 {
        return Gradients { edges, gx, gy, magnitude };
    }

    // Non-maximum suppression along the quantised gradient direction. The
    // asymmetric comparison keeps exactly one pixel of a two-pixel plateau.
    let thin = Image2D::from_fn(w, h, |x, y| {
        let m = magnitude.get(x, y);
        if m <= 1e-12 * max {
            return 0.0;
        }
        let angle = gy.get(x, y).atan2(gx.get(x, y)).to_degrees().rem_euclid(180.0);
        let (dx, dy) = if !(22.5..157.5).contains(&angle) {
            (1, 0)
        } else if angle < 67.5 {
            (1, 1)
        } else if angle < 112.5 {
            (0, 1)
        } else {
            (-1, 1)
        };
        let before = magnitude.get_clamped(x as isize - dx, y as isize - dy);
        let after = magnitude.get_clamped(x as isize + dx, y as isize + dy);
        if m > before && m >= after {
            m
        } else {
            0.0
        }
    });

    let (low, high) = (cfg.canny_low * max, cfg.canny_high * max);
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if thin.get(x, y) >= high {
                edges.set(x, y, true);
                queue.push_back((x, y));
            }
        }
    }
    while let Some((x, y)) = queue.pop_front() {
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let (nx, ny) = (nx as usize, ny as usize);
                if !edges.get(nx, ny) && thin.get(nx, ny) >= low {
                    edges.set(nx, ny, true);
                    queue.push_back((nx, ny));
                }
            }
        }
    }
    Gradients { edges, gx, gy, magnitude }
}

/// Canny edge map of a binary mask: Gaussian smoothing, Sobel gradient,
/// non-maximum suppression and hysteresis.
pub fn canny_edges(mask: &Mask2D, cfg: &SectorConfig) -> Mask2D {
    canny(mask, cfg).edges
}

#[derive(Debug, Clone, Copy)]
struct Peak {
    votes: u32,
    angle_idx: usize,
    offset_idx: usize,
}

struct Accumulator {
    n_angles: usize,
    n_offsets: usize,
    offset_min: f64,
    angle_step: f64,
    offset_step: f64,
    votes: Vec<u32>,
}

impl Accumulator {
    fn build(edges: &Mask2D, cfg: &SectorConfig) -> Self {
        let angle_step = cfg.hough_angle_step_deg;
        let offset_step = cfg.hough_offset_step_px;
        let n_angles = (180.0 / angle_step).round() as usize;
        let diag = (edges.width() as f64).hypot(edges.height() as f64);
        let offset_min = -diag;
        let n_offsets = (2.0 * diag / offset_step).ceil() as usize + 1;
        let trig: Vec<(f64, f64)> = (0..n_angles)
            .map(|a| (a as f64 * angle_step).to_radians().sin_cos())
            .collect();
        let mut votes = vec![0u32; n_angles * n_offsets];
        for y in 0..edges.height() {
            for x in 0..edges.width() {
                if !edges.get(x, y) {
                    continue;
                }
                for (a, &(s, c)) in trig.iter().enumerate() {
                    let rho = x as f64 * c + y as f64 * s;
                    let r = ((rho - offset_min) / offset_step).round() as usize;
                    votes[a * n_offsets + r] += 1;
                }
            }
        }
        Self { n_angles, n_offsets, offset_min, angle_step, offset_step, votes }
    }

    fn at(&self, a: isize, r: isize) -> u32 {
        // θ + 180° is the same line with negated offset
        let (a, r) = if a < 0 {
            (a + self.n_angles as isize, self.n_offsets as isize - 1 - r)
        } else if a >= self.n_angles as isize {
            (a - self.n_angles as isize, self.n_offsets as isize - 1 - r)
        } else {
            (a, r)
        };
        if r < 0 || r >= self.n_offsets as isize {
            0
        } else {
            self.votes[a as usize * self.n_offsets + r as usize]
        }
    }

    fn peaks(&self, cfg: &SectorConfig) -> Vec<Peak> {
        let ra = (cfg.hough_nms_angle_deg / self.angle_step).round() as isize;
        let rr = (cfg.hough_nms_offset_px / self.offset_step).round() as isize;
        let mut peaks = Vec::new();
        for a in 0..self.n_angles as isize {
            for r in 0..self.n_offsets as isize {
                let v = self.at(a, r);
                if v < cfg.hough_min_votes.max(1) {
                    continue;
                }
                let mut is_max = true;
                'nbhd: for da in -ra..=ra {
                    for dr in -rr..=rr {
                        if da == 0 && dr == 0 {
                            continue;
                        }
                        let u = self.at(a + da, r + dr);
                        // ties resolved toward the lexicographically first cell
                        let earlier = (da, dr) < (0, 0);
                        if u > v || (u == v && earlier) {
                            is_max = false;
                            break 'nbhd;
                        }
                    }
                }
                if is_max {
                    peaks.push(Peak { votes: v, angle_idx: a as usize, offset_idx: r as usize });
                }
            }
        }
        peaks.sort_by(|p, q| {
            q.votes
                .cmp(&p.votes)
                .then(p.angle_idx.cmp(&q.angle_idx))
                .then(p.offset_idx.cmp(&q.offset_idx))
        });
        peaks
    }

    fn line(&self, p: &Peak) -> Line2D {
        Line2D::new(
            p.angle_idx as f64 * self.angle_step,
            self.offset_min + p.offset_idx as f64 * self.offset_step,
        )
    }
}

fn line_separation_deg(a: &Line2D, b: &Line2D) -> f64 {
    let d = (a.angle_deg - b.angle_deg).rem_euclid(180.0);
    d.min(180.0 - d)
}

/// The two strongest Hough lines at least `min_line_separation_deg` apart,
/// in pixel coordinates, ordered by angle.
pub fn hough_sector_lines(edges: &Mask2D, cfg: &SectorConfig) -> Result<[Line2D; 2], SectorError> {
    let acc = Accumulator::build(edges, cfg);
    let peaks = acc.peaks(cfg);
    let best = peaks.first().ok_or(SectorError::SectorLinesNotFound)?;
    let first = acc.line(best);
    let floor = (cfg.hough_vote_fraction * best.votes as f64).max(cfg.hough_min_votes as f64);
    let second = peaks
        .iter()
        .skip(1)
        .take_while(|p| p.votes as f64 >= floor)
        .map(|p| acc.line(p))
        .find(|l| line_separation_deg(&first, l) >= cfg.min_line_separation_deg)
        .ok_or(SectorError::SectorLinesNotFound)?;
    let mut lines = [first, second];
    lines.sort_by(|a, b| a.angle_deg.partial_cmp(&b.angle_deg).unwrap_or(Ordering::Equal));
    Ok(lines)
}

/// Sub-pixel edge locations: parabolic peak of the gradient magnitude along
/// the gradient direction.
fn subpixel_edge(g: &Gradients, x: usize, y: usize) -> [f64; 2] {
    let (gx, gy) = (g.gx.get(x, y), g.gy.get(x, y));
    let n = gx.hypot(gy);
    if n == 0.0 {
        return [x as f64, y as f64];
    }
    let (dx, dy) = (gx / n, gy / n);
    let bilinear = |px: f64, py: f64| -> f64 {
        let (x0, y0) = (px.floor(), py.floor());
        let (fx, fy) = (px - x0, py - y0);
        let (x0, y0) = (x0 as isize, y0 as isize);
        let m = &g.magnitude;
        let a = m.get_clamped(x0, y0) * (1.0 - fx) + m.get_clamped(x0 + 1, y0) * fx;
        let b = m.get_clamped(x0, y0 + 1) * (1.0 - fx) + m.get_clamped(x0 + 1, y0 + 1) * fx;
        a * (1.0 - fy) + b * fy
    };
    let (xf, yf) = (x as f64, y as f64);
    let m0 = g.magnitude.get(x, y);
    let mm = bilinear(xf - dx, yf - dy);
    let mp = bilinear(xf + dx, yf + dy);
    let denom = mm - 2.0 * m0 + mp;
    let s = if denom < 0.0 { (0.5 * (mm - mp) / denom).clamp(-1.0, 1.0) } else { 0.0 };
    [xf + s * dx, yf + s * dy]
}

/// Total-least-squares refit of a coarse Hough line on nearby sub-pixel
/// edge points. Points within `margin` pixels of the image border are
/// ignored since smoothing there is one-sided.
fn refine_line(g: &Gradients, coarse: Line2D, band: f64, margin: usize) -> Line2D {
    let (w, h) = (g.edges.width(), g.edges.height());
    let mut line = coarse;
    for _ in 0..3 {
        let mut pts = Vec::new();
        for y in margin..h.saturating_sub(margin) {
            for x in margin..w.saturating_sub(margin) {
                if g.edges.get(x, y) && line.distance([x as f64, y as f64]).abs() <= band {
                    pts.push(subpixel_edge(g, x, y));
                }
            }
        }
        if pts.len() < 3 {
            return line;
        }
        let n = pts.len() as f64;
        let cx = pts.iter().map(|p| p[0]).sum::<f64>() / n;
        let cy = pts.iter().map(|p| p[1]).sum::<f64>() / n;
        let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
        for p in &pts {
            let (dx, dy) = (p[0] - cx, p[1] - cy);
            sxx += dx * dx;
            sxy += dx * dy;
            syy += dy * dy;
        }
        // normal = eigenvector of the smaller eigenvalue of the scatter matrix
        let theta = 0.5 * (2.0 * sxy).atan2(sxx - syy) + std::f64::consts::FRAC_PI_2;
        let (s, c) = theta.sin_cos();
        let mut refined = Line2D::new(theta.to_degrees(), cx * c + cy * s);
        // keep the orientation of the coarse normal
        let [c0, s0] = line.normal();
        if c0 * c + s0 * s < 0.0 {
            refined = Line2D::new(refined.angle_deg + 180.0, -refined.offset);
        }
        refined.angle_deg = refined.angle_deg.rem_euclid(360.0);
        line = refined;
    }
    line
}

/// Intersection point and inward opening angle (degrees) of two lines.
pub fn line_intersection_angle(l1: &Line2D, l2: &Line2D) -> Result<([f64; 2], f64), SectorError> {
    if line_separation_deg(l1, l2) < 0.1 {
        return Err(SectorError::ParallelFlanks);
    }
    let [a1, b1] = l1.normal();
    let [a2, b2] = l2.normal();
    let det = a1 * b2 - a2 * b1;
    let x = (l1.offset * b2 - l2.offset * b1) / det;
    let y = (a1 * l2.offset - a2 * l1.offset) / det;
    let d1 = l1.inward_direction();
    let d2 = l2.inward_direction();
    let cos = (d1[0] * d2[0] + d1[1] * d2[1]).clamp(-1.0, 1.0);
    Ok(([x, y], cos.acos().to_degrees()))
}

/// Physical frame of a 2D slice: lateral axis along columns, depth (`y`)
/// along rows.
#[derive(Debug, Clone, Copy)]
pub struct SliceFrame {
    pub origin: [f64; 2],
    pub spacing: [f64; 2],
}

/// Full mask → edges → lines → apex chain on one slice.
pub fn fit_sector_slice(slice: &Image2D<f64>, frame: SliceFrame, cfg: &SectorConfig) -> Result<SectorFit2D, SectorError> {
    let mask = extract_sector_mask(slice, cfg)?;
    let grads = canny(&mask, cfg);
    let coarse = hough_sector_lines(&grads.edges, cfg)?;
    let margin = (3.0 * cfg.canny_sigma).ceil() as usize;
    let refined = coarse.map(|l| refine_line(&grads, l, 2.0, margin));
    let physical = refined.map(|l| l.to_physical(frame.origin, frame.spacing));
    let (apex, angle) = line_intersection_angle(&physical[0], &physical[1])?;
    Ok(SectorFit2D { apex, opening_angle_deg: angle, lines: physical })
}

/// Which central plane to cut from a volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CentralPlane {
    /// `x = nx/2`; columns run along `z`.
    Yz,
    /// `z = nz/2`; columns run along `x`.
    Xy,
}

pub fn central_slice(vol: &VoxelVolume, plane: CentralPlane) -> (Image2D<f64>, SliceFrame) {
    let [nx, ny, nz] = vol.dims();
    let sp = vol.spacing();
    let o = vol.origin();
    match plane {
        CentralPlane::Yz => {
            let i = nx / 2;
            (
                Image2D::from_fn(nz, ny, |k, j| vol.get(i, j, k)),
                SliceFrame { origin: [o[2], o[1]], spacing: [sp[2], sp[1]] },
            )
        }
        CentralPlane::Xy => {
            let k = nz / 2;
            (
                Image2D::from_fn(nx, ny, |i, j| vol.get(i, j, k)),
                SliceFrame { origin: [o[0], o[1]], spacing: [sp[0], sp[1]] },
            )
        }
    }
}

/// Sector fits on the central `yz` and `xy` slices, in that order.
pub fn estimate_sector_fits(vol: &VoxelVolume, cfg: &SectorConfig) -> Result<[SectorFit2D; 2], SectorError> {
    let fit = |plane| {
        let (img, frame) = central_slice(vol, plane);
        fit_sector_slice(&img, frame, cfg)
    };
    Ok([fit(CentralPlane::Yz)?, fit(CentralPlane::Xy)?])
}

/// Camera distance is the closer of the two apexes; the view angle is the
/// wider of the two openings.
pub fn estimate_camera_placement(vol: &VoxelVolume, cfg: &SectorConfig) -> Result<CameraPlacement, SectorError> {
    let [yz, xy] = estimate_sector_fits(vol, cfg)?;
    if (yz.opening_angle_deg - xy.opening_angle_deg).abs() > 30.0 {
        warn!(
            "central-slice sector fits disagree: yz {:.1} deg, xy {:.1} deg",
            yz.opening_angle_deg, xy.opening_angle_deg
        );
    }
    let apex_y = yz.apex[1].max(xy.apex[1]);
    if apex_y >= 0.0 {
        return Err(SectorError::ApexNotBehindOrigin { apex_y });
    }
    Ok(CameraPlacement::new(-apex_y, yz.opening_angle_deg.max(xy.opening_angle_deg)))
}

/// Per-voxel sector support: threshold followed by closing on every
/// constant-`z` plane.
pub fn sector_support(vol: &VoxelVolume, cfg: &SectorConfig) -> Vec<bool> {
    let [nx, ny, nz] = vol.dims();
    let mut out = Vec::with_capacity(nx * ny * nz);
    let data = vol.data();
    for k in 0..nz {
        let base = k * nx * ny;
        let plane = Mask2D::from_fn(nx, ny, |i, j| data.get(base + i + nx * j) > cfg.threshold);
        out.extend_from_slice(plane.close(cfg.closing_kernel).data());
    }
    out
}

/// Raw uint8 view used by tests and the simulator.
pub fn volume_slice_u8(vol: &VoxelVolume) -> Option<&[u8]> {
    match vol.data() {
        VolumeData::U8(v) => Some(v),
        _ => None,
    }
}
