//! Point-cloud sequences: data model, rigid alignment into the reference frame
//! and SemanticKITTI-style file ingestion.
//!
//! On-disk layout of one sequence directory:
//!
//! ```text
//! velodyne/NNNNNN.bin    little-endian f32 quadruples (x, y, z, remission)
//! labels/NNNNNN.label    little-endian u32 per point, low 16 bits class, high 16 bits instance
//! poses.txt              one row-major 3x4 camera-frame pose per frame
//! calib.txt              "Tr:" line, row-major 3x4 lidar-to-camera transform
//! boxes.jsonl            optional, one `{"frame": i, "boxes": [...]}` record per labeled frame
//! ```

use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detfuse::Box3D;

const POINT_BYTES: usize = 16;
const ORTHONORMAL_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SeqError {
    #[error("scan {scan} has no pose")]
    MissingPose { scan: usize },
    #[error("pose of scan {scan} is not a proper rotation")]
    DegeneratePose { scan: usize },
    #[error("window [-{past}, {future}] exceeds sequence range [-{have_past}, {have_future}]")]
    RangeExceedsSequence {
        past: usize,
        future: usize,
        have_past: usize,
        have_future: usize,
    },
    #[error("{path}: {len} bytes is not a multiple of 16")]
    TruncatedFile { path: PathBuf, len: u64 },
    #[error("{path}: {labels} labels for {points} points")]
    LabelCountMismatch {
        path: PathBuf,
        labels: usize,
        points: usize,
    },
    #[error("frame {center} needs {n} frames on each side, only {available} frames exist")]
    BoundaryFrame {
        center: usize,
        n: usize,
        available: usize,
    },
    #[error("{path}: point {index} has non-finite coordinates")]
    NonFinitePoint { path: PathBuf, index: usize },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("invalid sequence: {0}")]
    InvalidSequence(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> SeqError + '_ {
    move |source| SeqError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub remission: f64,
}

impl Point3 {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self {
            x,
            y,
            z,
            remission: 0.0,
        }
    }

    pub fn with_remission(mut self, remission: f64) -> Self {
        self.remission = remission;
        self
    }

    pub fn xyz(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.remission.is_finite()
    }

    pub fn dist2(&self, other: &Point3) -> f64 {
        let (dx, dy, dz) = (self.x - other.x, self.y - other.y, self.z - other.z);
        dx * dx + dy * dy + dz * dz
    }

    pub fn dist(&self, other: &Point3) -> f64 {
        self.dist2(other).sqrt()
    }
}

/// Per-point annotation packed as `instance << 16 | class` on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PointLabel {
    pub class: u16,
    pub instance: u16,
}

impl PointLabel {
    pub fn new(class: u16, instance: u16) -> Self {
        Self { class, instance }
    }

    pub fn from_raw(raw: u32) -> Self {
        Self {
            class: (raw & 0xFFFF) as u16,
            instance: (raw >> 16) as u16,
        }
    }

    pub fn to_raw(self) -> u32 {
        (u32::from(self.instance) << 16) | u32::from(self.class)
    }
}

/// Rigid transform mapping sensor coordinates to world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::new(x, y, z),
        }
    }

    /// Rotation about +z followed by a translation.
    pub fn from_yaw_translation(yaw: f64, translation: Vector3<f64>) -> Self {
        let (s, c) = yaw.sin_cos();
        Self {
            rotation: Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
            translation,
        }
    }

    pub fn from_row_major(v: &[f64; 12]) -> Self {
        Self {
            rotation: Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]),
            translation: Vector3::new(v[3], v[7], v[11]),
        }
    }

    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t[0],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t[1],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t[2],
        ]
    }

    /// Orthonormal with determinant +1, all entries finite.
    pub fn is_valid(&self) -> bool {
        if !self.rotation.iter().chain(self.translation.iter()).all(|v| v.is_finite()) {
            return false;
        }
        let gram = self.rotation.transpose() * self.rotation;
        let ortho = (gram - Matrix3::identity()).iter().all(|v| v.abs() <= ORTHONORMAL_TOL);
        ortho && (self.rotation.determinant() - 1.0).abs() <= ORTHONORMAL_TOL
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        let v = self.rotation * p.xyz() + self.translation;
        Point3 {
            x: v[0],
            y: v[1],
            z: v[2],
            remission: p.remission,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == Matrix3::identity() && self.translation == Vector3::zeros()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scan {
    pub points: Vec<Point3>,
    pub labels: Option<Vec<PointLabel>>,
    pub time_offset: i32,
}

impl Scan {
    pub fn new(points: Vec<Point3>, time_offset: i32) -> Self {
        Self {
            points,
            labels: None,
            time_offset,
        }
    }

    pub fn with_labels(mut self, labels: Vec<PointLabel>) -> Self {
        self.labels = Some(labels);
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn classes(&self) -> Option<Vec<usize>> {
        self.labels
            .as_ref()
            .map(|l| l.iter().map(|l| usize::from(l.class)).collect())
    }
}

/// Time-ordered scans around a reference scan (time offset 0).
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub id: String,
    scans: Vec<Scan>,
    poses: Vec<Pose>,
    reference_index: usize,
    box_labels: Option<Vec<Box3D>>,
    aligned: bool,
}

impl Sequence {
    pub fn new(id: impl Into<String>, scans: Vec<Scan>, poses: Vec<Pose>) -> Result<Self, SeqError> {
        if scans.is_empty() {
            return Err(SeqError::InvalidSequence("no scans".into()));
        }
        if poses.len() < scans.len() {
            return Err(SeqError::MissingPose { scan: poses.len() });
        }
        if poses.len() > scans.len() {
            return Err(SeqError::InvalidSequence(format!(
                "{} poses for {} scans",
                poses.len(),
                scans.len()
            )));
        }
        if scans.windows(2).any(|w| w[0].time_offset >= w[1].time_offset) {
            return Err(SeqError::InvalidSequence(
                "scans not strictly ordered by time offset".into(),
            ));
        }
        let reference_index = scans
            .iter()
            .position(|s| s.time_offset == 0)
            .ok_or_else(|| SeqError::InvalidSequence("no reference scan".into()))?;
        for (i, s) in scans.iter().enumerate() {
            if let Some(labels) = &s.labels {
                if labels.len() != s.points.len() {
                    return Err(SeqError::InvalidSequence(format!(
                        "scan {i}: {} labels for {} points",
                        labels.len(),
                        s.points.len()
                    )));
                }
            }
        }
        Ok(Self {
            id: id.into(),
            scans,
            poses,
            reference_index,
            box_labels: None,
            aligned: false,
        })
    }

    pub fn with_box_labels(mut self, boxes: Vec<Box3D>) -> Self {
        self.box_labels = Some(boxes);
        self
    }

    pub fn scans(&self) -> &[Scan] {
        &self.scans
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn reference_index(&self) -> usize {
        self.reference_index
    }

    pub fn reference(&self) -> &Scan {
        &self.scans[self.reference_index]
    }

    pub fn reference_pose(&self) -> &Pose {
        &self.poses[self.reference_index]
    }

    pub fn box_labels(&self) -> Option<&[Box3D]> {
        self.box_labels.as_deref()
    }

    pub fn is_aligned(&self) -> bool {
        self.aligned
    }

    /// Number of past scans available.
    pub fn past_range(&self) -> usize {
        self.reference_index
    }

    /// Number of future scans available.
    pub fn future_range(&self) -> usize {
        self.scans.len() - self.reference_index - 1
    }

    pub fn scan_at(&self, time_offset: i32) -> Option<&Scan> {
        self.scans.iter().find(|s| s.time_offset == time_offset)
    }

    /// Rewrites every point label, e.g. to remap raw dataset ids.
    pub fn map_labels(mut self, f: impl Fn(PointLabel) -> PointLabel) -> Self {
        for s in &mut self.scans {
            if let Some(labels) = &mut s.labels {
                for l in labels.iter_mut() {
                    *l = f(*l);
                }
            }
        }
        self
    }

    /// Drops per-point labels everywhere; box labels are dropped too.
    pub fn without_labels(mut self) -> Self {
        for s in &mut self.scans {
            s.labels = None;
        }
        self.box_labels = None;
        self
    }
}

/// Expresses every scan in the reference scan's frame (`ref⁻¹ ∘ pose_t`).
pub fn align_sequence(seq: &Sequence) -> Result<Sequence, SeqError> {
    if seq.poses.len() < seq.scans.len() {
        return Err(SeqError::MissingPose {
            scan: seq.poses.len(),
        });
    }
    if let Some(i) = seq.poses.iter().position(|p| !p.is_valid()) {
        return Err(SeqError::DegeneratePose { scan: i });
    }
    let mut out = seq.clone();
    if seq.aligned {
        return Ok(out);
    }
    let ref_pose = seq.poses[seq.reference_index];
    let ref_inv = ref_pose.inverse();
    for (i, scan) in out.scans.iter_mut().enumerate() {
        let pose = &seq.poses[i];
        if i == seq.reference_index || *pose == ref_pose {
            continue;
        }
        let rel = ref_inv.compose(pose);
        if rel.is_identity() {
            continue;
        }
        for p in &mut scan.points {
            *p = rel.apply(p);
        }
    }
    out.aligned = true;
    Ok(out)
}

/// Sub-sequence with time offsets in `[-past, future]`.
pub fn window(seq: &Sequence, past: usize, future: usize) -> Result<Sequence, SeqError> {
    let (have_past, have_future) = (seq.past_range(), seq.future_range());
    if past > have_past || future > have_future {
        return Err(SeqError::RangeExceedsSequence {
            past,
            future,
            have_past,
            have_future,
        });
    }
    let lo = seq.reference_index - past;
    let hi = seq.reference_index + future;
    Ok(Sequence {
        id: seq.id.clone(),
        scans: seq.scans[lo..=hi].to_vec(),
        poses: seq.poses[lo..=hi].to_vec(),
        reference_index: past,
        box_labels: seq.box_labels.clone(),
        aligned: seq.aligned,
    })
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

pub fn frame_name(frame: usize) -> String {
    format!("{frame:06}")
}

pub fn read_bin(path: &Path) -> Result<Vec<Point3>, SeqError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() % POINT_BYTES != 0 {
        return Err(SeqError::TruncatedFile {
            path: path.to_path_buf(),
            len: bytes.len() as u64,
        });
    }
    let mut points = Vec::with_capacity(bytes.len() / POINT_BYTES);
    for (index, chunk) in bytes.chunks_exact(POINT_BYTES).enumerate() {
        let f = |i: usize| f32::from_le_bytes(chunk[i * 4..i * 4 + 4].try_into().unwrap()) as f64;
        let p = Point3 {
            x: f(0),
            y: f(1),
            z: f(2),
            remission: f(3),
        };
        if !p.is_finite() {
            return Err(SeqError::NonFinitePoint {
                path: path.to_path_buf(),
                index,
            });
        }
        points.push(p);
    }
    Ok(points)
}

pub fn write_bin(path: &Path, points: &[Point3]) -> Result<(), SeqError> {
    let mut bytes = Vec::with_capacity(points.len() * POINT_BYTES);
    for p in points {
        for v in [p.x, p.y, p.z, p.remission] {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_labels(path: &Path) -> Result<Vec<PointLabel>, SeqError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() % 4 != 0 {
        return Err(SeqError::TruncatedFile {
            path: path.to_path_buf(),
            len: bytes.len() as u64,
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| PointLabel::from_raw(u32::from_le_bytes(c.try_into().unwrap())))
        .collect())
}

pub fn write_labels(path: &Path, labels: &[PointLabel]) -> Result<(), SeqError> {
    let bytes: Vec<u8> = labels.iter().flat_map(|l| l.to_raw().to_le_bytes()).collect();
    fs::write(path, bytes).map_err(io_err(path))
}

fn parse_floats(path: &Path, line_no: usize, text: &str) -> Result<[f64; 12], SeqError> {
    let vals: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| SeqError::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg: e.to_string(),
        })?;
    vals.try_into().map_err(|v: Vec<f64>| SeqError::Parse {
        path: path.to_path_buf(),
        line: line_no,
        msg: format!("expected 12 values, found {}", v.len()),
    })
}

/// Raw camera-frame poses, one per line.
pub fn read_poses(path: &Path) -> Result<Vec<Pose>, SeqError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut poses = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        poses.push(Pose::from_row_major(&parse_floats(path, i + 1, &line)?));
    }
    Ok(poses)
}

fn format_row(v: &[f64; 12]) -> String {
    v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ")
}

pub fn write_poses(path: &Path, poses: &[Pose]) -> Result<(), SeqError> {
    let mut out = String::new();
    for p in poses {
        out.push_str(&format_row(&p.to_row_major()));
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

/// The `Tr:` lidar-to-camera transform from a calib file.
pub fn read_calib(path: &Path) -> Result<Pose, SeqError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    for (i, line) in text.lines().enumerate() {
        if let Some(rest) = line.trim_start().strip_prefix("Tr:") {
            return Ok(Pose::from_row_major(&parse_floats(path, i + 1, rest)?));
        }
    }
    Err(SeqError::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: "missing Tr: line".into(),
    })
}

pub fn write_calib(path: &Path, tr: &Pose) -> Result<(), SeqError> {
    let text = format!("Tr: {}\n", format_row(&tr.to_row_major()));
    fs::write(path, text).map_err(io_err(path))
}

#[derive(Debug, Serialize, Deserialize)]
struct BoxRecord {
    frame: usize,
    boxes: Vec<Box3D>,
}

fn read_box_labels(path: &Path, frame: usize) -> Result<Option<Vec<Box3D>>, SeqError> {
    if !path.exists() {
        return Ok(None);
    }
    let file = fs::File::open(path).map_err(io_err(path))?;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: BoxRecord = serde_json::from_str(&line).map_err(|e| SeqError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        if rec.frame == frame {
            return Ok(Some(rec.boxes));
        }
    }
    Ok(None)
}

/// Number of frames in a drive directory (counted from `velodyne/`).
pub fn count_frames(dir: &Path) -> Result<usize, SeqError> {
    let vdir = dir.join("velodyne");
    let entries = fs::read_dir(&vdir).map_err(io_err(&vdir))?;
    let mut n = 0;
    for e in entries {
        let e = e.map_err(io_err(&vdir))?;
        if e.path().extension().is_some_and(|x| x == "bin") {
            n += 1;
        }
    }
    Ok(n)
}

/// Loads the `2n+1` frames centred on `center` from a SemanticKITTI-style
/// drive directory. Poses are converted from the camera frame to the lidar
/// frame as `Tr⁻¹ · P · Tr`.
pub fn load_kitti_sequence(dir: &Path, center: usize, n: usize) -> Result<Sequence, SeqError> {
    let poses_cam = read_poses(&dir.join("poses.txt"))?;
    let available = poses_cam.len();
    if center < n || center + n >= available {
        return Err(SeqError::BoundaryFrame {
            center,
            n,
            available,
        });
    }
    let tr = read_calib(&dir.join("calib.txt"))?;
    let tr_inv = tr.inverse();
    let mut scans = Vec::with_capacity(2 * n + 1);
    let mut poses = Vec::with_capacity(2 * n + 1);
    for frame in center - n..=center + n {
        let name = frame_name(frame);
        let points = read_bin(&dir.join("velodyne").join(format!("{name}.bin")))?;
        let label_path = dir.join("labels").join(format!("{name}.label"));
        let labels = if label_path.exists() {
            let labels = read_labels(&label_path)?;
            if labels.len() != points.len() {
                return Err(SeqError::LabelCountMismatch {
                    path: label_path,
                    labels: labels.len(),
                    points: points.len(),
                });
            }
            Some(labels)
        } else {
            None
        };
        scans.push(Scan {
            points,
            labels,
            time_offset: frame as i32 - center as i32,
        });
        poses.push(tr_inv.compose(&poses_cam[frame]).compose(&tr));
    }
    let id = format!(
        "{}@{}",
        dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        center
    );
    let mut seq = Sequence::new(id, scans, poses)?;
    seq.box_labels = read_box_labels(&dir.join("boxes.jsonl"), center)?;
    Ok(seq)
}

/// Writes a sequence as a drive directory whose frames are numbered from 0;
/// the reference scan lands on frame `past_range()`. Lidar-frame poses are
/// converted to camera frame with `tr`.
pub fn write_kitti_sequence(seq: &Sequence, dir: &Path, tr: &Pose) -> Result<(), SeqError> {
    let vdir = dir.join("velodyne");
    fs::create_dir_all(&vdir).map_err(io_err(&vdir))?;
    let has_labels = seq.scans.iter().any(|s| s.labels.is_some());
    let ldir = dir.join("labels");
    if has_labels {
        fs::create_dir_all(&ldir).map_err(io_err(&ldir))?;
    }
    for (frame, scan) in seq.scans.iter().enumerate() {
        let name = frame_name(frame);
        write_bin(&vdir.join(format!("{name}.bin")), &scan.points)?;
        if let Some(labels) = &scan.labels {
            write_labels(&ldir.join(format!("{name}.label")), labels)?;
        }
    }
    let tr_inv = tr.inverse();
    let cam: Vec<Pose> = seq.poses.iter().map(|p| tr.compose(p).compose(&tr_inv)).collect();
    write_poses(&dir.join("poses.txt"), &cam)?;
    write_calib(&dir.join("calib.txt"), tr)?;
    if let Some(boxes) = &seq.box_labels {
        let path = dir.join("boxes.jsonl");
        let mut f = fs::File::create(&path).map_err(io_err(&path))?;
        let rec = BoxRecord {
            frame: seq.reference_index,
            boxes: boxes.clone(),
        };
        let line = serde_json::to_string(&rec).expect("box record serializes");
        writeln!(f, "{line}").map_err(io_err(&path))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scan(offset: i32, pts: &[(f64, f64, f64)]) -> Scan {
        Scan::new(pts.iter().map(|&(x, y, z)| Point3::new(x, y, z)).collect(), offset)
    }

    fn seq3(poses: Vec<Pose>) -> Sequence {
        let scans = (-1..=1).map(|t| scan(t, &[(0.0, 0.0, 0.0), (1.5, -2.0, 0.25)])).collect();
        Sequence::new("s", scans, poses).unwrap()
    }

    #[test]
    fn identity_alignment_is_exact() {
        let seq = seq3(vec![Pose::identity(); 3]);
        let aligned = align_sequence(&seq).unwrap();
        assert!(aligned.is_aligned());
        for (a, b) in aligned.scans().iter().zip(seq.scans()) {
            assert_eq!(a.points, b.points);
        }
    }

    #[test]
    fn translation_moves_origin() {
        let seq = seq3(vec![
            Pose::identity(),
            Pose::identity(),
            Pose::from_translation(1.0, 0.0, 0.0),
        ]);
        let aligned = align_sequence(&seq).unwrap();
        let p = aligned.scan_at(1).unwrap().points[0];
        assert_eq!((p.x, p.y, p.z), (1.0, 0.0, 0.0));
    }

    #[test]
    fn same_pose_leaves_scan_untouched() {
        let pose = Pose::from_yaw_translation(0.3, Vector3::new(4.0, -1.0, 0.5));
        let seq = seq3(vec![pose; 3]);
        let aligned = align_sequence(&seq).unwrap();
        for (a, b) in aligned.scans().iter().zip(seq.scans()) {
            assert_eq!(a.points, b.points);
        }
    }

    #[test]
    fn degenerate_pose_rejected() {
        let mut bad = Pose::identity();
        bad.rotation[(0, 0)] = 2.0;
        let seq = seq3(vec![Pose::identity(), bad, Pose::identity()]);
        assert!(matches!(align_sequence(&seq), Err(SeqError::DegeneratePose { scan: 1 })));
    }

    #[test]
    fn missing_pose_rejected() {
        let scans = (-1..=1).map(|t| scan(t, &[])).collect();
        let err = Sequence::new("s", scans, vec![Pose::identity(); 2]).unwrap_err();
        assert!(matches!(err, SeqError::MissingPose { scan: 2 }));
    }

    #[test]
    fn windows() {
        let scans = (-3..=3).map(|t| scan(t, &[(t as f64, 0.0, 0.0)])).collect();
        let seq = Sequence::new("s", scans, vec![Pose::identity(); 7]).unwrap();
        assert_eq!(window(&seq, 3, 3).unwrap(), seq);
        let w = window(&seq, 2, 0).unwrap();
        let offsets: Vec<i32> = w.scans().iter().map(|s| s.time_offset).collect();
        assert_eq!(offsets, vec![-2, -1, 0]);
        assert_eq!(w.reference().time_offset, 0);
        let w = window(&seq, 0, 0).unwrap();
        assert_eq!(w.scans().len(), 1);
        assert_eq!(w.reference(), seq.reference());
        assert!(matches!(
            window(&seq, 4, 0),
            Err(SeqError::RangeExceedsSequence { .. })
        ));
    }

    #[test]
    fn label_bit_split() {
        let l = PointLabel::from_raw(0x0001_000A);
        assert_eq!(l.class, 10);
        assert_eq!(l.instance, 1);
        assert_eq!(l.to_raw(), 0x0001_000A);
    }

    #[test]
    fn bin_of_32_bytes_is_two_points() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.bin");
        fs::write(&path, [0u8; 32]).unwrap();
        assert_eq!(read_bin(&path).unwrap().len(), 2);
        fs::write(&path, [0u8; 33]).unwrap();
        assert!(matches!(read_bin(&path), Err(SeqError::TruncatedFile { len: 33, .. })));
    }

    #[test]
    fn nan_point_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.bin");
        let mut bytes = vec![0u8; 16];
        bytes[4..8].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        assert!(matches!(read_bin(&path), Err(SeqError::NonFinitePoint { index: 0, .. })));
    }

    fn camera_tr() -> Pose {
        // Typical velodyne -> camera axes swap plus offset.
        Pose {
            rotation: Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0),
            translation: Vector3::new(-0.004, -0.076, -0.27),
        }
    }

    fn drive(frames: usize) -> Sequence {
        let n = frames / 2;
        let scans = (0..frames)
            .map(|f| {
                let t = f as i32 - n as i32;
                let pts = vec![Point3::new(f as f64, 1.0, 2.0).with_remission(0.5); f + 1];
                let labels = (0..=f).map(|i| PointLabel::new(i as u16, 7)).collect();
                Scan::new(pts, t).with_labels(labels)
            })
            .collect();
        let poses = (0..frames)
            .map(|f| Pose::from_yaw_translation(0.1 * f as f64, Vector3::new(f as f64, 0.5, 0.0)))
            .collect();
        Sequence::new("d", scans, poses).unwrap()
    }

    #[test]
    fn kitti_roundtrip_converts_poses() {
        let dir = tempfile::tempdir().unwrap();
        let seq = drive(5);
        write_kitti_sequence(&seq, dir.path(), &camera_tr()).unwrap();
        let back = load_kitti_sequence(dir.path(), 2, 2).unwrap();
        assert_eq!(back.scans().len(), 5);
        for (a, b) in back.scans().iter().zip(seq.scans()) {
            assert_eq!(a.time_offset, b.time_offset);
            assert_eq!(a.labels, b.labels);
        }
        for (a, b) in back.poses().iter().zip(seq.poses()) {
            for (x, y) in a.to_row_major().iter().zip(b.to_row_major()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        let inner = load_kitti_sequence(dir.path(), 2, 1).unwrap();
        assert_eq!(inner.scans().len(), 3);
    }

    #[test]
    fn boundary_frames() {
        let dir = tempfile::tempdir().unwrap();
        write_kitti_sequence(&drive(5), dir.path(), &Pose::identity()).unwrap();
        assert!(matches!(
            load_kitti_sequence(dir.path(), 0, 2),
            Err(SeqError::BoundaryFrame { .. })
        ));
        assert!(matches!(
            load_kitti_sequence(dir.path(), 3, 2),
            Err(SeqError::BoundaryFrame { .. })
        ));
    }

    #[test]
    fn label_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        write_kitti_sequence(&drive(3), dir.path(), &Pose::identity()).unwrap();
        write_labels(&dir.path().join("labels/000001.label"), &[PointLabel::new(1, 0)]).unwrap();
        assert!(matches!(
            load_kitti_sequence(dir.path(), 1, 1),
            Err(SeqError::LabelCountMismatch { labels: 1, points: 2, .. })
        ));
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (-3.2f64..3.2, -50.0f64..50.0, -50.0f64..50.0, -2.0f64..2.0)
            .prop_map(|(yaw, x, y, z)| Pose::from_yaw_translation(yaw, Vector3::new(x, y, z)))
    }

    proptest! {
        #[test]
        fn pose_inverse_is_identity(p in arb_pose()) {
            let id = p.compose(&p.inverse());
            for (a, b) in id.to_row_major().iter().zip(Pose::identity().to_row_major()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn alignment_preserves_distances_and_round_trips(
            poses in proptest::collection::vec(arb_pose(), 3),
            pts in proptest::collection::vec((-30.0f64..30.0, -30.0f64..30.0, -3.0f64..3.0), 2..8),
        ) {
            let pts: Vec<_> = pts;
            let scans = (-1..=1).map(|t| scan(t, &pts)).collect();
            let seq = Sequence::new("s", scans, poses.clone()).unwrap();
            let aligned = align_sequence(&seq).unwrap();
            for (i, (a, b)) in aligned.scans().iter().zip(seq.scans()).enumerate() {
                for j in 1..a.points.len() {
                    let before = b.points[0].dist(&b.points[j]);
                    let after = a.points[0].dist(&a.points[j]);
                    prop_assert!((before - after).abs() < 1e-9);
                }
                // Reference pose maps aligned points back to world coordinates.
                for (pa, pb) in a.points.iter().zip(&b.points) {
                    let world_a = seq.reference_pose().apply(pa);
                    let world_b = poses[i].apply(pb);
                    prop_assert!((world_a.x - world_b.x).abs() < 1e-9);
                    prop_assert!((world_a.y - world_b.y).abs() < 1e-9);
                    prop_assert!((world_a.z - world_b.z).abs() < 1e-9);
                }
            }
        }
    }
}
