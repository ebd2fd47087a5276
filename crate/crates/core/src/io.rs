//! File formats: MetaImage volumes, 16-bit depth PGM, 8-bit slice PGM,
//! ASCII PLY meshes and trajectory JSON Lines.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::DepthImage;
use crate::image::Image2D;
use crate::tracking::{TrackResult, TrackStatus};
use crate::tsdf::{TriangleMesh, TsdfGrid};
use crate::types::{ElementKind, GridGeometry, RigidPose, VolumeData, VolumeError, VoxelVolume};

/// Depth PGM stores `round(depth_mm * DEPTH_SCALE)`.
pub const DEPTH_SCALE: f64 = 32.0;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header at line {line}: {msg}")]
    MalformedHeader { line: usize, msg: String },
    #[error("payload length mismatch: expected {expected} bytes, found {found}")]
    PayloadLengthMismatch { expected: usize, found: usize },
    #[error("unsupported element type {0}")]
    UnsupportedElementType(String),
    #[error("parse error at {location}: {msg}")]
    Parse { location: String, msg: String },
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

impl IoError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::Io { path: path.to_path_buf(), source }
    }

    fn parse(location: impl Into<String>, msg: impl Into<String>) -> Self {
        IoError::Parse { location: location.into(), msg: msg.into() }
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(|e| IoError::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    fs::write(path, bytes).map_err(|e| IoError::io(path, e))
}

// ---------------------------------------------------------------- MetaImage

fn element_type_name(kind: ElementKind) -> &'static str {
    match kind {
        ElementKind::U8 => "MET_UCHAR",
        ElementKind::I16 => "MET_SHORT",
        ElementKind::F32 => "MET_FLOAT",
    }
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

fn payload(data: &VolumeData) -> Vec<u8> {
    match data {
        VolumeData::U8(v) => v.clone(),
        VolumeData::I16(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        VolumeData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
    }
}

fn header_text(vol: &VoxelVolume, data_file: &str) -> String {
    let g = vol.geometry();
    format!(
        "NDims = 3\nDimSize = {}\nElementSpacing = {}\nOffset = {}\nElementType = {}\nElementDataFile = {}\n",
        join(&g.dims),
        join(&g.spacing),
        join(&g.origin),
        element_type_name(vol.kind()),
        data_file
    )
}

/// Writes `.mha` (header and payload in one file) or `.mhd` (payload in a
/// sibling `.raw`), chosen by extension.
pub fn write_volume(vol: &VoxelVolume, path: &Path) -> Result<(), IoError> {
    let bytes = payload(vol.data());
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("mhd")) {
        let raw = path.with_extension("raw");
        let name = raw.file_name().and_then(|n| n.to_str()).expect("utf-8 file name").to_string();
        write_bytes(path, header_text(vol, &name).as_bytes())?;
        write_bytes(&raw, &bytes)
    } else {
        let mut out = header_text(vol, "LOCAL").into_bytes();
        out.extend_from_slice(&bytes);
        write_bytes(path, &out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub offset: [f64; 3],
    pub kind: ElementKind,
    pub data_file: String,
}

const KEYS: [&str; 6] = ["NDims", "DimSize", "ElementSpacing", "Offset", "ElementType", "ElementDataFile"];

fn parse_triple<T: std::str::FromStr>(value: &str, line: usize, key: &str) -> Result<[T; 3], IoError> {
    let parts: Vec<T> = value
        .split_whitespace()
        .map(|s| s.parse::<T>())
        .collect::<Result<_, _>>()
        .map_err(|_| IoError::MalformedHeader { line, msg: format!("bad {key} value '{value}'") })?;
    <[T; 3]>::try_from(parts).map_err(|_| IoError::MalformedHeader { line, msg: format!("{key} needs 3 values") })
}

/// Parses the header and returns it with the byte offset of the payload.
pub fn parse_volume_header(bytes: &[u8]) -> Result<(VolumeHeader, usize), IoError> {
    let mut pos = 0;
    let mut dims = None;
    let mut spacing = None;
    let mut offset = None;
    let mut kind = None;
    for (i, key) in KEYS.iter().enumerate() {
        let line_no = i + 1;
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or(IoError::MalformedHeader { line: line_no, msg: "unexpected end of header".into() })?;
        let line = std::str::from_utf8(&bytes[pos..pos + end])
            .map_err(|_| IoError::MalformedHeader { line: line_no, msg: "not UTF-8".into() })?;
        pos += end + 1;
        let (k, v) = line
            .split_once('=')
            .ok_or(IoError::MalformedHeader { line: line_no, msg: format!("expected '{key} = ...'") })?;
        let (k, v) = (k.trim(), v.trim());
        if k != *key {
            return Err(IoError::MalformedHeader { line: line_no, msg: format!("expected key {key}, found {k}") });
        }
        match i {
            0 if v != "3" => return Err(IoError::MalformedHeader { line: line_no, msg: format!("NDims must be 3, got {v}") }),
            1 => dims = Some(parse_triple::<usize>(v, line_no, k)?),
            2 => spacing = Some(parse_triple::<f64>(v, line_no, k)?),
            3 => offset = Some(parse_triple::<f64>(v, line_no, k)?),
            4 => {
                kind = Some(match v {
                    "MET_UCHAR" => ElementKind::U8,
                    "MET_SHORT" => ElementKind::I16,
                    "MET_FLOAT" => ElementKind::F32,
                    other => return Err(IoError::UnsupportedElementType(other.to_string())),
                })
            }
            5 => {
                let header = VolumeHeader {
                    dims: dims.expect("parsed"),
                    spacing: spacing.expect("parsed"),
                    offset: offset.expect("parsed"),
                    kind: kind.expect("parsed"),
                    data_file: v.to_string(),
                };
                return Ok((header, pos));
            }
            _ => {}
        }
    }
    unreachable!("loop returns on the last key")
}

fn decode(kind: ElementKind, bytes: &[u8]) -> VolumeData {
    match kind {
        ElementKind::U8 => VolumeData::U8(bytes.to_vec()),
        ElementKind::I16 => VolumeData::I16(bytes.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]])).collect()),
        ElementKind::F32 => VolumeData::F32(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()),
    }
}

fn element_size(kind: ElementKind) -> usize {
    match kind {
        ElementKind::U8 => 1,
        ElementKind::I16 => 2,
        ElementKind::F32 => 4,
    }
}

pub fn read_volume(path: &Path) -> Result<VoxelVolume, IoError> {
    let bytes = read_bytes(path)?;
    let (h, start) = parse_volume_header(&bytes)?;
    let raw;
    let body: &[u8] = if h.data_file == "LOCAL" {
        &bytes[start..]
    } else {
        let dir = path.parent().unwrap_or(Path::new("."));
        raw = read_bytes(&dir.join(&h.data_file))?;
        &raw
    };
    let geometry = GridGeometry::new(h.dims, h.spacing, h.offset)?;
    let expected = geometry.voxel_count() * element_size(h.kind);
    if body.len() != expected {
        return Err(IoError::PayloadLengthMismatch { expected, found: body.len() });
    }
    Ok(VoxelVolume::new(geometry, decode(h.kind, body))?)
}

// ---------------------------------------------------------------- PGM

/// Reads the `P5` header; returns (width, height, maxval, payload offset).
fn parse_pgm_header(bytes: &[u8]) -> Result<(usize, usize, u32, usize), IoError> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(IoError::parse(format!("byte {pos}"), "truncated PGM header"));
        }
        fields.push((start, String::from_utf8_lossy(&bytes[start..pos]).into_owned()));
    }
    if fields[0].1 != "P5" {
        return Err(IoError::parse("byte 0", format!("expected magic P5, found {}", fields[0].1)));
    }
    let num = |i: usize| -> Result<u32, IoError> {
        let (at, s) = &fields[i];
        s.parse().map_err(|_| IoError::parse(format!("byte {at}"), format!("bad number '{s}'")))
    };
    let (w, h, maxval) = (num(1)? as usize, num(2)? as usize, num(3)?);
    if maxval == 0 || maxval > 65535 {
        return Err(IoError::parse(format!("byte {}", fields[3].0), format!("maxval {maxval} out of range")));
    }
    // exactly one whitespace byte ends the header
    Ok((w, h, maxval, pos + 1))
}

/// 16-bit big-endian PGM; samples are `round(depth_mm * 32)`, 0 = invalid.
pub fn encode_depth_pgm(depth: &DepthImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", depth.width, depth.height).into_bytes();
    for &d in &depth.depth {
        let q = if d > 0.0 { (d as f64 * DEPTH_SCALE).round().clamp(0.0, 65535.0) as u16 } else { 0 };
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

pub fn decode_depth_pgm(bytes: &[u8]) -> Result<DepthImage, IoError> {
    let (w, h, maxval, start) = parse_pgm_header(bytes)?;
    if maxval != 65535 {
        return Err(IoError::parse("header", format!("depth PGM needs maxval 65535, found {maxval}")));
    }
    let body = bytes.get(start..).unwrap_or(&[]);
    if body.len() != 2 * w * h {
        return Err(IoError::PayloadLengthMismatch { expected: 2 * w * h, found: body.len() });
    }
    let depth = body.chunks_exact(2).map(|c| (u16::from_be_bytes([c[0], c[1]]) as f64 / DEPTH_SCALE) as f32).collect();
    Ok(DepthImage { width: w, height: h, depth })
}

pub fn write_depth_pgm(depth: &DepthImage, path: &Path) -> Result<(), IoError> {
    write_bytes(path, &encode_depth_pgm(depth))
}

pub fn read_depth_pgm(path: &Path) -> Result<DepthImage, IoError> {
    decode_depth_pgm(&read_bytes(path)?)
}

pub fn write_pgm8(img: &Image2D<u8>, path: &Path) -> Result<(), IoError> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.data());
    write_bytes(path, &out)
}

pub fn read_pgm8(path: &Path) -> Result<Image2D<u8>, IoError> {
    let bytes = read_bytes(path)?;
    let (w, h, maxval, start) = parse_pgm_header(&bytes)?;
    if maxval > 255 {
        return Err(IoError::parse("header", format!("8-bit PGM needs maxval ≤ 255, found {maxval}")));
    }
    let body = bytes.get(start..).unwrap_or(&[]);
    if body.len() != w * h {
        return Err(IoError::PayloadLengthMismatch { expected: w * h, found: body.len() });
    }
    Ok(Image2D::from_vec(w, h, body.to_vec()))
}

/// Writes `<stem>_xy.pgm`, `<stem>_yz.pgm`, `<stem>_xz.pgm`.
pub fn write_slices(slices: &[Image2D<u8>; 3], stem: &Path) -> Result<[PathBuf; 3], IoError> {
    let paths = ["xy", "yz", "xz"].map(|s| with_suffix(stem, &format!("_{s}.pgm")));
    for (img, p) in slices.iter().zip(&paths) {
        write_pgm8(img, p)?;
    }
    Ok(paths)
}

/// `dir/name` + `suffix`, keeping any dots in `name`.
pub fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

// ---------------------------------------------------------------- PLY

pub fn encode_ply(mesh: &TriangleMesh) -> String {
    let mut s = String::with_capacity(64 * mesh.vertices.len() + 24 * mesh.triangles.len() + 256);
    s.push_str("ply\nformat ascii 1.0\n");
    s.push_str(&format!("element vertex {}\n", mesh.vertices.len()));
    for p in ["x", "y", "z", "nx", "ny", "nz"] {
        s.push_str(&format!("property float {p}\n"));
    }
    s.push_str(&format!("element face {}\nproperty list uchar int vertex_indices\nend_header\n", mesh.triangles.len()));
    for (v, n) in mesh.vertices.iter().zip(&mesh.normals) {
        s.push_str(&format!("{} {} {} {} {} {}\n", v[0], v[1], v[2], n[0], n[1], n[2]));
    }
    for t in &mesh.triangles {
        s.push_str(&format!("3 {} {} {}\n", t[0], t[1], t[2]));
    }
    s
}

pub fn decode_ply(text: &str) -> Result<TriangleMesh, IoError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut next = |what: &str| lines.next().ok_or_else(|| IoError::parse("end of file", format!("expected {what}")));
    let expect = |(n, l): (usize, &str), want: &str| -> Result<(), IoError> {
        if l.trim() == want {
            Ok(())
        } else {
            Err(IoError::parse(format!("line {n}"), format!("expected '{want}', found '{l}'")))
        }
    };
    expect(next("ply")?, "ply")?;
    expect(next("format")?, "format ascii 1.0")?;
    let count = |(n, l): (usize, &str), element: &str| -> Result<usize, IoError> {
        l.strip_prefix(&format!("element {element} "))
            .and_then(|c| c.trim().parse().ok())
            .ok_or_else(|| IoError::parse(format!("line {n}"), format!("expected 'element {element} <count>'")))
    };
    let nv = count(next("vertex element")?, "vertex")?;
    for p in ["x", "y", "z", "nx", "ny", "nz"] {
        expect(next("property")?, &format!("property float {p}"))?;
    }
    let nf = count(next("face element")?, "face")?;
    expect(next("face property")?, "property list uchar int vertex_indices")?;
    expect(next("end_header")?, "end_header")?;
    let mut mesh = TriangleMesh::default();
    for _ in 0..nv {
        let (n, l) = next("vertex")?;
        let vals: Vec<f32> = l
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|_| IoError::parse(format!("line {n}"), "bad vertex number"))?;
        if vals.len() != 6 {
            return Err(IoError::parse(format!("line {n}"), format!("vertex needs 6 values, found {}", vals.len())));
        }
        mesh.vertices.push([vals[0], vals[1], vals[2]]);
        mesh.normals.push([vals[3], vals[4], vals[5]]);
    }
    for _ in 0..nf {
        let (n, l) = next("face")?;
        let vals: Vec<u32> = l
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|_| IoError::parse(format!("line {n}"), "bad face index"))?;
        if vals.len() != 4 || vals[0] != 3 {
            return Err(IoError::parse(format!("line {n}"), "faces must be triangles"));
        }
        if vals[1..].iter().any(|&i| i as usize >= nv) {
            return Err(IoError::parse(format!("line {n}"), "face index out of range"));
        }
        mesh.triangles.push([vals[1], vals[2], vals[3]]);
    }
    if let Some((n, l)) = lines.find(|(_, l)| !l.trim().is_empty()) {
        return Err(IoError::parse(format!("line {n}"), format!("trailing content '{l}'")));
    }
    Ok(mesh)
}

pub fn write_ply(mesh: &TriangleMesh, path: &Path) -> Result<(), IoError> {
    write_bytes(path, encode_ply(mesh).as_bytes())
}

pub fn read_ply(path: &Path) -> Result<TriangleMesh, IoError> {
    let bytes = read_bytes(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| IoError::parse(format!("byte {}", e.valid_up_to()), "not UTF-8"))?;
    decode_ply(text)
}

// ---------------------------------------------------------------- trajectory

/// One JSON Lines record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryRecord {
    pub frame: usize,
    pub status: TrackStatus,
    pub rotation: Vec<f64>,
    pub translation_mm: Vec<f64>,
    pub inlier_ratio: f64,
    pub mean_residual_mm: f64,
}

impl TrajectoryRecord {
    pub fn from_result(frame: usize, r: &TrackResult) -> Self {
        Self {
            frame,
            status: r.status,
            rotation: r.pose.rotation_row_major().to_vec(),
            translation_mm: r.pose.translation.as_slice().to_vec(),
            inlier_ratio: r.inlier_ratio,
            mean_residual_mm: r.mean_residual,
        }
    }

    /// Ground-truth record: tracked, perfect fit.
    pub fn from_pose(frame: usize, pose: &RigidPose) -> Self {
        Self::from_result(frame, &TrackResult { pose: *pose, status: TrackStatus::Tracked, inlier_ratio: 1.0, mean_residual: 0.0 })
    }

    pub fn pose(&self) -> RigidPose {
        let r: [f64; 9] = self.rotation.as_slice().try_into().expect("validated length");
        let t: [f64; 3] = self.translation_mm.as_slice().try_into().expect("validated length");
        RigidPose::from_row_major(r, t)
    }

    pub fn track_result(&self) -> TrackResult {
        TrackResult { pose: self.pose(), status: self.status, inlier_ratio: self.inlier_ratio, mean_residual: self.mean_residual_mm }
    }
}

pub fn encode_trajectory(records: &[TrajectoryRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("plain data serializes"));
        s.push('\n');
    }
    s
}

pub fn decode_trajectory(text: &str) -> Result<Vec<TrajectoryRecord>, IoError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = format!("line {}", i + 1);
        let rec: TrajectoryRecord = serde_json::from_str(line).map_err(|e| IoError::parse(&at, e.to_string()))?;
        if rec.rotation.len() != 9 {
            return Err(IoError::parse(at, "rotation must have 9 entries"));
        }
        if rec.translation_mm.len() != 3 {
            return Err(IoError::parse(at, "translation_mm must have 3 entries"));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_trajectory(records: &[TrajectoryRecord], path: &Path) -> Result<(), IoError> {
    let file = fs::File::create(path).map_err(|e| IoError::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(encode_trajectory(records).as_bytes()).map_err(|e| IoError::io(path, e))?;
    w.flush().map_err(|e| IoError::io(path, e))
}

pub fn read_trajectory(path: &Path) -> Result<Vec<TrajectoryRecord>, IoError> {
    let file = fs::File::open(path).map_err(|e| IoError::io(path, e))?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        text.push_str(&line.map_err(|e| IoError::io(path, e))?);
        text.push('\n');
    }
    decode_trajectory(&text)
}

// ---------------------------------------------------------------- TSDF

/// Writes `<stem>_tsdf.mha` and `<stem>_weight.mha` (float32).
pub fn write_tsdf_snapshot(grid: &TsdfGrid, stem: &Path) -> Result<[PathBuf; 2], IoError> {
    let g = grid.geometry();
    let tsdf = VoxelVolume::new(g, VolumeData::F32(grid.tsdf().to_vec()))?;
    let weight = VoxelVolume::new(g, VolumeData::F32(grid.weights().to_vec()))?;
    let paths = [with_suffix(stem, "_tsdf.mha"), with_suffix(stem, "_weight.mha")];
    write_volume(&tsdf, &paths[0])?;
    write_volume(&weight, &paths[1])?;
    Ok(paths)
}

/// Truncation and weight cap are not stored in the snapshot.
pub fn read_tsdf_snapshot(stem: &Path, truncation: f64, max_weight: f32) -> Result<TsdfGrid, IoError> {
    let tsdf = read_volume(&with_suffix(stem, "_tsdf.mha"))?;
    let weight = read_volume(&with_suffix(stem, "_weight.mha"))?;
    if tsdf.geometry() != weight.geometry() {
        return Err(VolumeError::DimensionMismatch(tsdf.dims(), weight.dims()).into());
    }
    let (VolumeData::F32(t), VolumeData::F32(w)) = (tsdf.data(), weight.data()) else {
        return Err(IoError::UnsupportedElementType("TSDF channels must be MET_FLOAT".into()));
    };
    Ok(TsdfGrid::from_parts(*tsdf.geometry(), truncation, max_weight, t.clone(), w.clone())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_u8() -> VoxelVolume {
        let g = GridGeometry::new([2, 2, 2], [0.5, 1.0, 1.5], [-1.0, 0.0, 2.25]).unwrap();
        VoxelVolume::new(g, VolumeData::U8((0..8).collect())).unwrap()
    }

    #[test]
    fn header_keys_in_order() {
        let text = header_text(&tiny_u8(), "LOCAL");
        let keys: Vec<&str> = text.lines().map(|l| l.split(" = ").next().unwrap()).collect();
        assert_eq!(keys, KEYS);
        assert!(text.contains("DimSize = 2 2 2\n"));
        assert!(text.contains("ElementSpacing = 0.5 1 1.5\n"));
        assert!(text.contains("ElementType = MET_UCHAR\n"));
    }

    #[test]
    fn round_trip_uint8_mha_and_mhd() {
        let dir = tempfile::tempdir().unwrap();
        let vol = tiny_u8();
        for name in ["v.mha", "v.mhd"] {
            let p = dir.path().join(name);
            write_volume(&vol, &p).unwrap();
            assert_eq!(read_volume(&p).unwrap(), vol);
        }
        assert_eq!(fs::read(dir.path().join("v.raw")).unwrap(), (0..8).collect::<Vec<u8>>());
    }

    #[test]
    fn short_payload_is_length_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.mha");
        write_volume(&tiny_u8(), &p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.pop();
        fs::write(&p, bytes).unwrap();
        let e = read_volume(&p).unwrap_err();
        assert!(matches!(e, IoError::PayloadLengthMismatch { expected: 8, found: 7 }));
        assert!(e.to_string().contains("payload length mismatch"));
    }

    #[test]
    fn double_element_type_is_unsupported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.mha");
        let text = header_text(&tiny_u8(), "LOCAL").replace("MET_UCHAR", "MET_DOUBLE");
        fs::write(&p, text).unwrap();
        let e = read_volume(&p).unwrap_err();
        assert!(matches!(e, IoError::UnsupportedElementType(ref t) if t == "MET_DOUBLE"));
        assert!(e.to_string().contains("unsupported element type"));
    }

    #[test]
    fn malformed_header_names_line() {
        let e = parse_volume_header(b"NDims = 3\nDimSize = 2 2\n").unwrap_err();
        assert!(matches!(e, IoError::MalformedHeader { line: 2, .. }), "{e}");
        let e = parse_volume_header(b"NDims = 3\nOffset = 0 0 0\n").unwrap_err();
        assert!(matches!(e, IoError::MalformedHeader { line: 2, .. }), "{e}");
    }

    #[test]
    fn depth_quantization_example() {
        let d = DepthImage { width: 2, height: 1, depth: vec![100.0, 0.0] };
        let bytes = encode_depth_pgm(&d);
        let header = b"P5\n2 1\n65535\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0x0c, 0x80, 0, 0]);
        assert_eq!(decode_depth_pgm(&bytes).unwrap(), d);
    }

    #[test]
    fn pgm_header_accepts_comments() {
        let bytes = b"P5 # depth\n# size\n1 1\n65535\n\x00\x40";
        assert_eq!(decode_depth_pgm(bytes).unwrap().depth, vec![2.0]);
        assert!(matches!(decode_depth_pgm(b"P2\n1 1\n65535\n\x00\x40"), Err(IoError::Parse { .. })));
    }

    #[test]
    fn ply_triangle_round_trip() {
        let mesh = TriangleMesh {
            vertices: vec![[0.0, 0.0, 0.0], [1.5, 0.0, -2.25], [0.1, 0.2, 0.3]],
            normals: vec![[0.0, 0.0, 1.0]; 3],
            triangles: vec![[0, 1, 2]],
        };
        assert_eq!(decode_ply(&encode_ply(&mesh)).unwrap(), mesh);
    }

    #[test]
    fn ply_errors_name_the_line() {
        let mesh = TriangleMesh { vertices: vec![[0.0; 3]], normals: vec![[0.0, 0.0, 1.0]], triangles: vec![] };
        let text = encode_ply(&mesh).replace("0 0 0 0 0 1", "0 0 0 0 1");
        let e = decode_ply(&text).unwrap_err();
        assert!(e.to_string().contains("line 13"), "{e}");
    }

    #[test]
    fn rotation_entry_count_is_checked() {
        let line = r#"{"frame":0,"status":"tracked","rotation":[1,0,0,0,1,0,0,0],"translation_mm":[0,0,0],"inlier_ratio":1,"mean_residual_mm":0}"#;
        let e = decode_trajectory(line).unwrap_err();
        assert!(e.to_string().contains("rotation must have 9 entries"), "{e}");
        assert!(e.to_string().contains("line 1"));
    }

    #[test]
    fn trajectory_field_names() {
        let r = TrajectoryRecord::from_pose(3, &RigidPose::from_translation(crate::types::Vec3::new(1.0, 2.0, 3.0)));
        let s = encode_trajectory(std::slice::from_ref(&r));
        assert!(s.starts_with(r#"{"frame":3,"status":"tracked","rotation":[1.0,0.0,0.0,0.0,1.0,0.0,0.0,0.0,1.0],"translation_mm":[1.0,2.0,3.0],"inlier_ratio":1.0,"mean_residual_mm":0.0}"#), "{s}");
        assert_eq!(decode_trajectory(&s).unwrap(), vec![r]);
    }

    #[test]
    fn tsdf_snapshot_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = GridGeometry::new([3, 4, 5], [0.75; 3], [1.0, -2.0, 0.5]).unwrap();
        let n = g.voxel_count();
        let grid = TsdfGrid::from_parts(g, 3.0, 64.0, (0..n).map(|i| (i as f32 / n as f32) - 0.5).collect(), (0..n).map(|i| (i % 7) as f32).collect()).unwrap();
        let stem = dir.path().join("model.v1");
        let paths = write_tsdf_snapshot(&grid, &stem).unwrap();
        assert!(paths[0].ends_with("model.v1_tsdf.mha") && paths[1].ends_with("model.v1_weight.mha"));
        let back = read_tsdf_snapshot(&stem, 3.0, 64.0).unwrap();
        assert_eq!(back.tsdf(), grid.tsdf());
        assert_eq!(back.weights(), grid.weights());
        assert_eq!(back.geometry(), grid.geometry());
    }
}
