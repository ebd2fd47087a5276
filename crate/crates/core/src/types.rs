//! Shared geometric and volumetric value types.
//!
//! World frame convention: the probe sits at `y < 0` and the beam points
//! toward `+y`. Every acquisition volume places its origin in the centre of
//! the `xz`-plane at `y = 0`, so voxel row `j = 0` lies on the `y = 0` plane.

use nalgebra::{Matrix3, Rotation3, Vector3};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VolumeError {
    #[error("data length {len} does not match dims {dims:?}")]
    LengthMismatch { len: usize, dims: [usize; 3] },
    #[error("spacing must be strictly positive, got {0:?}")]
    BadSpacing([f64; 3]),
    #[error("dims must be positive, got {0:?}")]
    BadDims([usize; 3]),
    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimensionMismatch([usize; 3], [usize; 3]),
    #[error("segmentation voxel {index} has value {value}, expected 0 or 1")]
    NotBinary { index: usize, value: u8 },
    #[error("expected a uint8 volume")]
    NotUint8,
}

/// Scalar element kind of a [`VoxelVolume`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ElementKind {
    U8,
    I16,
    F32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum VolumeData {
    U8(Vec<u8>),
    I16(Vec<i16>),
    F32(Vec<f32>),
}

impl VolumeData {
    pub fn len(&self) -> usize {
        match self {
            VolumeData::U8(v) => v.len(),
            VolumeData::I16(v) => v.len(),
            VolumeData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> ElementKind {
        match self {
            VolumeData::U8(_) => ElementKind::U8,
            VolumeData::I16(_) => ElementKind::I16,
            VolumeData::F32(_) => ElementKind::F32,
        }
    }

    #[inline]
    pub fn get(&self, i: usize) -> f64 {
        match self {
            VolumeData::U8(v) => v[i] as f64,
            VolumeData::I16(v) => v[i] as f64,
            VolumeData::F32(v) => v[i] as f64,
        }
    }
}

/// Position and spacing of a regular voxel lattice, without payload.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridGeometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl GridGeometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self, VolumeError> {
        if dims.contains(&0) {
            return Err(VolumeError::BadDims(dims));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(VolumeError::BadSpacing(spacing));
        }
        Ok(Self { dims, spacing, origin })
    }

    /// Lattice that follows the acquisition convention: centred in `x`/`z`,
    /// first row on `y = 0`.
    pub fn probe_centred(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self, VolumeError> {
        let origin = [
            -((dims[0] as f64 - 1.0) / 2.0) * spacing[0],
            0.0,
            -((dims[2] as f64 - 1.0) / 2.0) * spacing[2],
        ];
        Self::new(dims, spacing, origin)
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn linear_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn voxel_to_world(&self, idx: Vec3) -> Vec3 {
        Vec3::new(
            self.origin[0] + idx.x * self.spacing[0],
            self.origin[1] + idx.y * self.spacing[1],
            self.origin[2] + idx.z * self.spacing[2],
        )
    }

    #[inline]
    pub fn world_to_voxel(&self, p: Vec3) -> Vec3 {
        Vec3::new(
            (p.x - self.origin[0]) / self.spacing[0],
            (p.y - self.origin[1]) / self.spacing[1],
            (p.z - self.origin[2]) / self.spacing[2],
        )
    }

    pub fn min_spacing(&self) -> f64 {
        self.spacing.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// World-space corners of the lattice's bounding box (voxel centres).
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let lo = self.voxel_to_world(Vec3::zeros());
        let hi = self.voxel_to_world(Vec3::new(
            (self.dims[0] - 1) as f64,
            (self.dims[1] - 1) as f64,
            (self.dims[2] - 1) as f64,
        ));
        (lo, hi)
    }

    pub fn diagonal(&self) -> f64 {
        let (lo, hi) = self.bounds();
        (hi - lo).norm()
    }
}

/// Dense 3D scalar grid with physical spacing and origin, `x` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelVolume {
    geometry: GridGeometry,
    data: VolumeData,
}

impl VoxelVolume {
    pub fn new(geometry: GridGeometry, data: VolumeData) -> Result<Self, VolumeError> {
        // re-validate in case the geometry was built by hand
        let geometry = GridGeometry::new(geometry.dims, geometry.spacing, geometry.origin)?;
        if data.len() != geometry.voxel_count() {
            return Err(VolumeError::LengthMismatch {
                len: data.len(),
                dims: geometry.dims,
            });
        }
        Ok(Self { geometry, data })
    }

    pub fn zeros(geometry: GridGeometry, kind: ElementKind) -> Self {
        let n = geometry.voxel_count();
        let data = match kind {
            ElementKind::U8 => VolumeData::U8(vec![0; n]),
            ElementKind::I16 => VolumeData::I16(vec![0; n]),
            ElementKind::F32 => VolumeData::F32(vec![0.0; n]),
        };
        Self { geometry, data }
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.geometry.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.geometry.origin
    }

    pub fn kind(&self) -> ElementKind {
        self.data.kind()
    }

    pub fn data(&self) -> &VolumeData {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut VolumeData {
        &mut self.data
    }

    pub fn into_data(self) -> VolumeData {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data.get(self.geometry.linear_index(i, j, k))
    }

    pub fn voxel_to_world(&self, idx: Vec3) -> Vec3 {
        self.geometry.voxel_to_world(idx)
    }

    pub fn world_to_voxel(&self, p: Vec3) -> Vec3 {
        self.geometry.world_to_voxel(p)
    }

    /// Trilinear interpolation at a world point. `None` when any of the
    /// eight surrounding voxels lies outside the grid.
    pub fn trilinear_sample(&self, world_point: Vec3) -> Option<f64> {
        let idx = self.world_to_voxel(world_point);
        match &self.data {
            VolumeData::U8(v) => trilinear(v, &self.geometry.dims, idx),
            VolumeData::I16(v) => trilinear(v, &self.geometry.dims, idx),
            VolumeData::F32(v) => trilinear(v, &self.geometry.dims, idx),
        }
    }

    pub fn max_value(&self) -> f64 {
        (0..self.data.len())
            .map(|i| self.data.get(i))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Copy of the payload widened to `f32`.
    pub fn to_f32(&self) -> Vec<f32> {
        match &self.data {
            VolumeData::U8(v) => v.iter().map(|&x| x as f32).collect(),
            VolumeData::I16(v) => v.iter().map(|&x| x as f32).collect(),
            VolumeData::F32(v) => v.clone(),
        }
    }
}

pub fn voxel_to_world(vol: &VoxelVolume, idx: Vec3) -> Vec3 {
    vol.voxel_to_world(idx)
}

pub fn trilinear_sample(vol: &VoxelVolume, world_point: Vec3) -> Option<f64> {
    vol.trilinear_sample(world_point)
}

/// Trilinear interpolation over a raw x-fastest slice at fractional voxel
/// index `idx`.
#[inline]
pub(crate) fn trilinear<T: Copy + Into<f64>>(data: &[T], dims: &[usize; 3], idx: Vec3) -> Option<f64> {
    let (x0, fx) = cell(idx.x, dims[0])?;
    let (y0, fy) = cell(idx.y, dims[1])?;
    let (z0, fz) = cell(idx.z, dims[2])?;
    let sx = if dims[0] > 1 { 1 } else { 0 };
    let sy = if dims[1] > 1 { dims[0] } else { 0 };
    let sz = if dims[2] > 1 { dims[0] * dims[1] } else { 0 };
    let base = x0 + dims[0] * (y0 + dims[1] * z0);
    let at = |o: usize| -> f64 { data[base + o].into() };
    let c00 = at(0) * (1.0 - fx) + at(sx) * fx;
    let c10 = at(sy) * (1.0 - fx) + at(sy + sx) * fx;
    let c01 = at(sz) * (1.0 - fx) + at(sz + sx) * fx;
    let c11 = at(sz + sy) * (1.0 - fx) + at(sz + sy + sx) * fx;
    let c0 = c00 * (1.0 - fy) + c10 * fy;
    let c1 = c01 * (1.0 - fy) + c11 * fy;
    Some(c0 * (1.0 - fz) + c1 * fz)
}

/// Lower cell corner and fractional offset along one axis. The last voxel is
/// addressable exactly (offset 0 from the previous cell's far corner).
#[inline]
pub(crate) fn cell(t: f64, n: usize) -> Option<(usize, f64)> {
    let max = (n - 1) as f64;
    if !(t >= 0.0 && t <= max) {
        return None;
    }
    if n == 1 {
        return Some((0, 0.0));
    }
    let f = t.floor();
    if f >= max {
        Some((n - 2, 1.0))
    } else {
        Some((f as usize, t - f))
    }
}

/// A uint8 volume restricted to labels {0, 1}.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationVolume(VoxelVolume);

impl SegmentationVolume {
    pub fn new(vol: VoxelVolume) -> Result<Self, VolumeError> {
        match vol.data() {
            VolumeData::U8(v) => {
                if let Some((index, &value)) = v.iter().enumerate().find(|(_, &x)| x > 1) {
                    return Err(VolumeError::NotBinary { index, value });
                }
            }
            _ => return Err(VolumeError::NotUint8),
        }
        Ok(Self(vol))
    }

    pub fn from_mask(geometry: GridGeometry, mask: Vec<u8>) -> Result<Self, VolumeError> {
        Self::new(VoxelVolume::new(geometry, VolumeData::U8(mask))?)
    }

    pub fn empty(geometry: GridGeometry) -> Self {
        Self(VoxelVolume::zeros(geometry, ElementKind::U8))
    }

    pub fn volume(&self) -> &VoxelVolume {
        &self.0
    }

    pub fn into_volume(self) -> VoxelVolume {
        self.0
    }

    pub fn geometry(&self) -> &GridGeometry {
        self.0.geometry()
    }

    pub fn labels(&self) -> &[u8] {
        match self.0.data() {
            VolumeData::U8(v) => v,
            _ => unreachable!("checked at construction"),
        }
    }

    pub fn foreground_count(&self) -> usize {
        self.labels().iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.labels().iter().all(|&v| v == 0)
    }
}

/// Dice overlap `2|A∩B| / (|A|+|B|)`. Two empty masks score 1.0.
pub fn dice_score(a: &SegmentationVolume, b: &SegmentationVolume) -> Result<f64, VolumeError> {
    if a.geometry().dims != b.geometry().dims {
        return Err(VolumeError::DimensionMismatch(a.geometry().dims, b.geometry().dims));
    }
    Ok(dice_of_masks(a.labels(), b.labels()))
}

pub(crate) fn dice_of_masks(a: &[u8], b: &[u8]) -> f64 {
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x != 0, y != 0);
        na += x as usize;
        nb += y as usize;
        both += (x && y) as usize;
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * both as f64 / (na + nb) as f64
    }
}

/// Rigid transform `p ↦ R·p + t` (rotation + translation in mm).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidPose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for RigidPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidPose {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self::new(Mat3::identity(), t)
    }

    /// Rotation by `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 || angle == 0.0 {
            return Self::identity();
        }
        let r = Rotation3::new(axis / n * angle);
        Self::new(*r.matrix(), Vec3::zeros())
    }

    /// Rotation about an axis through `center`.
    pub fn rotation_about(center: Vec3, axis: Vec3, angle: f64) -> Self {
        let r = Self::from_axis_angle(axis, angle).rotation;
        Self::new(r, center - r * center)
    }

    /// Exact exponential of the rotation part of a twist `(ω, t)`.
    pub fn from_twist(omega: Vec3, t: Vec3) -> Self {
        Self::new(*Rotation3::new(omega).matrix(), t)
    }

    #[inline]
    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidPose) -> RigidPose {
        RigidPose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> RigidPose {
        let rt = self.rotation.transpose();
        RigidPose::new(rt, -(rt * self.translation))
    }

    /// Nearest rotation matrix to the current rotation part (polar
    /// decomposition), translation unchanged.
    pub fn orthonormalized(&self) -> RigidPose {
        let svd = self.rotation.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * vt;
        }
        RigidPose::new(r, self.translation)
    }

    /// Rotation angle of the rotation part, in radians, in `[0, π]`.
    pub fn rotation_angle(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        let angle = c.acos();
        if angle < 1e-4 {
            // acos loses precision near 1; use the skew part instead
            let r = &self.rotation;
            let w = Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
            (w.norm() / 2.0).asin()
        } else {
            angle
        }
    }

    /// Largest deviation of `RᵀR` from identity, and `|det R − 1|`.
    pub fn orthonormality_error(&self) -> (f64, f64) {
        let d = self.rotation.transpose() * self.rotation - Mat3::identity();
        (d.abs().max(), (self.rotation.determinant() - 1.0).abs())
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        let (o, d) = self.orthonormality_error();
        o <= tol && d <= tol && self.translation.iter().all(|v| v.is_finite())
    }

    pub fn rotation_row_major(&self) -> [f64; 9] {
        let r = &self.rotation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)],
            r[(1, 0)], r[(1, 1)], r[(1, 2)],
            r[(2, 0)], r[(2, 1)], r[(2, 2)],
        ]
    }

    pub fn from_row_major(rotation: [f64; 9], translation: [f64; 3]) -> Self {
        Self::new(Mat3::from_row_slice(&rotation), Vec3::from(translation))
    }
}

/// Rotation angle (degrees) and translation distance (mm) between two poses.
pub fn pose_difference(a: &RigidPose, b: &RigidPose) -> (f64, f64) {
    let d = a.inverse().compose(b);
    (d.rotation_angle().to_degrees(), (a.translation - b.translation).norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn unit_geom(dims: [usize; 3]) -> GridGeometry {
        GridGeometry::new(dims, [1.0; 3], [0.0; 3]).unwrap()
    }

    #[test]
    fn voxel_to_world_examples() {
        let g = GridGeometry::new([4, 4, 4], [1.0; 3], [-10.0; 3]).unwrap();
        assert_eq!(g.voxel_to_world(Vec3::zeros()), Vec3::new(-10.0, -10.0, -10.0));
        let g = GridGeometry::new([4, 4, 4], [0.5; 3], [0.0; 3]).unwrap();
        assert_eq!(g.voxel_to_world(Vec3::new(2.0, 0.0, 0.0)), Vec3::new(1.0, 0.0, 0.0));
        let g = GridGeometry::new([4, 4, 4], [2.0, 1.0, 1.0], [-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(g.voxel_to_world(Vec3::new(1.5, 2.0, 3.0)), Vec3::new(2.0, 2.0, 5.0));
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(matches!(
            GridGeometry::new([2, 2, 2], [1.0, 0.0, 1.0], [0.0; 3]),
            Err(VolumeError::BadSpacing(_))
        ));
        assert!(matches!(
            VoxelVolume::new(unit_geom([2, 2, 2]), VolumeData::U8(vec![0; 7])),
            Err(VolumeError::LengthMismatch { .. })
        ));
        let v = VoxelVolume::new(unit_geom([2, 1, 1]), VolumeData::U8(vec![0, 2])).unwrap();
        assert!(matches!(SegmentationVolume::new(v), Err(VolumeError::NotBinary { index: 1, value: 2 })));
    }

    #[test]
    fn trilinear_examples() {
        let data: Vec<f32> = (0..27).map(|i| i as f32 * 1.5).collect();
        let vol = VoxelVolume::new(
            GridGeometry::new([3, 3, 3], [0.5, 1.0, 2.0], [1.0, -1.0, 3.0]).unwrap(),
            VolumeData::F32(data.clone()),
        )
        .unwrap();
        for k in 0..3 {
            for j in 0..3 {
                for i in 0..3 {
                    let p = vol.voxel_to_world(Vec3::new(i as f64, j as f64, k as f64));
                    let expected = data[i + 3 * (j + 3 * k)] as f64;
                    assert_eq!(vol.trilinear_sample(p), Some(expected));
                }
            }
        }
        let pair = VoxelVolume::new(unit_geom([2, 1, 1]), VolumeData::U8(vec![0, 1])).unwrap();
        assert_eq!(pair.trilinear_sample(Vec3::new(0.5, 0.0, 0.0)), Some(0.5));
        assert_eq!(pair.trilinear_sample(Vec3::new(1.01, 0.0, 0.0)), None);
        assert_eq!(pair.trilinear_sample(Vec3::new(0.5, -0.2, 0.0)), None);
    }

    #[test]
    fn dice_examples() {
        let g = unit_geom([4, 1, 1]);
        let seg = |m: [u8; 4]| SegmentationVolume::from_mask(g, m.to_vec()).unwrap();
        assert_eq!(dice_score(&seg([1, 1, 0, 0]), &seg([1, 1, 0, 0])).unwrap(), 1.0);
        assert_eq!(dice_score(&seg([1, 1, 0, 0]), &seg([0, 0, 1, 1])).unwrap(), 0.0);
        assert_eq!(dice_score(&seg([1, 1, 0, 0]), &seg([0, 1, 1, 0])).unwrap(), 0.5);
        assert_eq!(dice_score(&seg([0; 4]), &seg([0; 4])).unwrap(), 1.0);
        let other = SegmentationVolume::empty(unit_geom([2, 2, 1]));
        assert!(matches!(
            dice_score(&seg([0; 4]), &other),
            Err(VolumeError::DimensionMismatch(..))
        ));
    }

    #[test]
    fn rotation_angle_small_and_large() {
        for &a in &[1e-7, 1e-3, 0.5, 3.0] {
            let p = RigidPose::from_axis_angle(Vec3::new(1.0, 2.0, -0.5), a);
            assert_relative_eq!(p.rotation_angle(), a, max_relative = 1e-6);
        }
    }

    fn arb_pose() -> impl Strategy<Value = RigidPose> {
        (
            prop::array::uniform3(-1.0f64..1.0),
            -3.1f64..3.1,
            prop::array::uniform3(-100.0f64..100.0),
        )
            .prop_map(|(axis, angle, t)| {
                let mut p = RigidPose::from_axis_angle(Vec3::from(axis) + Vec3::new(1e-3, 0.0, 0.0), angle);
                p.translation = Vec3::from(t);
                p
            })
    }

    fn arb_mask(n: usize) -> impl Strategy<Value = Vec<u8>> {
        prop::collection::vec(0u8..2, n)
    }

    proptest! {
        #[test]
        fn pose_invariants(a in arb_pose(), b in arb_pose(), c in arb_pose()) {
            prop_assert!(a.is_valid(1e-6));
            let id = a.compose(&a.inverse());
            prop_assert!((id.rotation - Mat3::identity()).abs().max() < 1e-6);
            prop_assert!(id.translation.norm() < 1e-6);
            let l = a.compose(&b).compose(&c);
            let r = a.compose(&b.compose(&c));
            prop_assert!((l.rotation - r.rotation).abs().max() < 1e-6);
            prop_assert!((l.translation - r.translation).norm() < 1e-6);
        }

        #[test]
        fn world_voxel_round_trip(
            spacing in prop::array::uniform3(0.1f64..5.0),
            origin in prop::array::uniform3(-200.0f64..200.0),
            idx in prop::array::uniform3(0usize..64),
        ) {
            let g = GridGeometry::new([64; 3], spacing, origin).unwrap();
            let v = Vec3::new(idx[0] as f64, idx[1] as f64, idx[2] as f64);
            let back = g.world_to_voxel(g.voxel_to_world(v));
            prop_assert!((back - v).abs().max() * spacing.iter().cloned().fold(0.0, f64::max) < 1e-9);
        }

        #[test]
        fn dice_symmetric_and_reflexive(a in arb_mask(27), b in arb_mask(27)) {
            let g = unit_geom([3, 3, 3]);
            let sa = SegmentationVolume::from_mask(g, a).unwrap();
            let sb = SegmentationVolume::from_mask(g, b).unwrap();
            prop_assert_eq!(dice_score(&sa, &sb).unwrap(), dice_score(&sb, &sa).unwrap());
            prop_assert_eq!(dice_score(&sa, &sa).unwrap(), 1.0);
        }
    }
}
