//! SemanticKITTI-compatible frame, label, and pose files, plus rigid alignment.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// One LiDAR return: 3D coordinates in meters plus reflected intensity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub r: f32,
}

impl Point {
    pub fn coords(&self) -> [f32; 3] {
        [self.x, self.y, self.z]
    }
}

/// One LiDAR scan. Immutable after construction; coordinates are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub points: Vec<Point>,
    pub frame_id: u64,
}

impl Frame {
    pub fn new(points: Vec<Point>, frame_id: u64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyInput);
        }
        for (i, p) in points.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite() && p.r.is_finite()) {
                return Err(Error::InvalidData {
                    path: Default::default(),
                    detail: format!("non-finite value at point {i}"),
                });
            }
        }
        Ok(Frame { points, frame_id })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Per-point class ids after remapping, alongside the raw on-disk values.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelArray {
    pub labels: Vec<u16>,
    pub raw_labels: Vec<u32>,
}

impl LabelArray {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Table mapping raw SemanticKITTI semantic ids to contiguous class ids `[0, q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RemapTable {
    map: BTreeMap<u32, u16>,
    num_classes: u16,
}

/// The standard SemanticKITTI learning map: 19 valid classes plus the
/// outlier/unlabeled class at id 0.
const SEMANTIC_KITTI_MAP: &[(u32, u16)] = &[
    (0, 0),
    (1, 0),
    (10, 1),
    (11, 2),
    (13, 5),
    (15, 3),
    (16, 5),
    (18, 4),
    (20, 5),
    (30, 6),
    (31, 7),
    (32, 8),
    (40, 9),
    (44, 10),
    (48, 11),
    (49, 12),
    (50, 13),
    (51, 14),
    (52, 0),
    (60, 9),
    (70, 15),
    (71, 16),
    (72, 17),
    (80, 18),
    (81, 19),
    (99, 0),
    (252, 1),
    (253, 7),
    (254, 6),
    (255, 8),
    (256, 5),
    (257, 5),
    (258, 4),
    (259, 5),
];

impl RemapTable {
    pub fn new(entries: impl IntoIterator<Item = (u32, u16)>) -> Result<Self> {
        let map: BTreeMap<u32, u16> = entries.into_iter().collect();
        if map.is_empty() {
            return Err(Error::InvalidConfig {
                detail: "remap table is empty".into(),
            });
        }
        let num_classes = map.values().copied().max().unwrap() + 1;
        Ok(RemapTable { map, num_classes })
    }

    pub fn semantic_kitti() -> Self {
        Self::new(SEMANTIC_KITTI_MAP.iter().copied()).unwrap()
    }

    pub fn num_classes(&self) -> u16 {
        self.num_classes
    }

    pub fn remap(&self, raw_semantic: u32) -> Option<u16> {
        self.map.get(&raw_semantic).copied()
    }

    /// Smallest raw id mapping to `class`, for writing label files back out.
    pub fn raw_for(&self, class: u16) -> Option<u32> {
        self.map
            .iter()
            .find(|(_, &c)| c == class)
            .map(|(&raw, _)| raw)
    }

    /// Parse `raw_id=mapped_id` lines; `#` starts a comment.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.splitn(2, '=');
            let bad = |detail: &str| Error::MalformedLine {
                path: path.to_path_buf(),
                line: lineno + 1,
                detail: detail.into(),
            };
            let raw = parts
                .next()
                .and_then(|s| s.trim().parse::<u32>().ok())
                .ok_or_else(|| bad("expected raw_id=mapped_id"))?;
            let mapped = parts
                .next()
                .and_then(|s| s.trim().parse::<u16>().ok())
                .ok_or_else(|| bad("expected raw_id=mapped_id"))?;
            entries.push((raw, mapped));
        }
        Self::new(entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (raw, mapped) in &self.map {
            out.push_str(&format!("{raw}={mapped}\n"));
        }
        fs::write(path, out)?;
        Ok(())
    }
}

/// Rigid transform from a frame's local coordinates into the world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    /// Checks rotation orthonormality and det = +1, both within 1e-5.
    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let mut dot = 0.0;
                for k in 0..3 {
                    dot += r[k][i] * r[k][j];
                }
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > 1e-5 {
                    return Err(Error::InvalidPose {
                        detail: format!("R^T R [{i},{j}] = {dot:.7}, expected {expect}"),
                    });
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > 1e-5 {
            return Err(Error::InvalidPose {
                detail: format!("det(R) = {det:.7}, expected +1"),
            });
        }
        Ok(())
    }

    pub fn transform(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
        ]
    }

    /// Composition: `self ∘ other` (apply `other` first, then `self`).
    pub fn compose(&self, other: &Pose) -> Pose {
        let a = &self.rotation;
        let b = &other.rotation;
        let mut rotation = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    rotation[i][j] += a[i][k] * b[k][j];
                }
            }
        }
        Pose {
            rotation,
            translation: self.transform(other.translation),
        }
    }

    pub fn inverse(&self) -> Pose {
        let r = &self.rotation;
        let mut rt = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                rt[i][j] = r[j][i];
            }
        }
        let t = &self.translation;
        let translation = [
            -(rt[0][0] * t[0] + rt[0][1] * t[1] + rt[0][2] * t[2]),
            -(rt[1][0] * t[0] + rt[1][1] * t[1] + rt[1][2] * t[2]),
            -(rt[2][0] * t[0] + rt[2][1] * t[1] + rt[2][2] * t[2]),
        ];
        Pose {
            rotation: rt,
            translation,
        }
    }
}

/// Reads a packed `<id>.bin` point file: four little-endian f32 per point.
pub fn read_frame(path: &Path, frame_id: u64) -> Result<Frame> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound {
            path: path.to_path_buf(),
        },
        _ => Error::Io(e),
    })?;
    if bytes.len() % 16 != 0 {
        return Err(Error::MalformedFile {
            path: path.to_path_buf(),
            detail: format!("size {} is not a multiple of 16", bytes.len()),
        });
    }
    if bytes.is_empty() {
        return Err(Error::MalformedFile {
            path: path.to_path_buf(),
            detail: "no points".into(),
        });
    }
    let n = bytes.len() / 16;
    let mut points = Vec::with_capacity(n);
    for i in 0..n {
        let at = |k: usize| {
            let o = 16 * i + 4 * k;
            f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap())
        };
        let p = Point {
            x: at(0),
            y: at(1),
            z: at(2),
            r: at(3),
        };
        if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite() && p.r.is_finite()) {
            return Err(Error::InvalidData {
                path: path.to_path_buf(),
                detail: format!("non-finite value at point {i}"),
            });
        }
        points.push(p);
    }
    Ok(Frame { points, frame_id })
}

pub fn write_frame(frame: &Frame, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(frame.len() * 16);
    for p in &frame.points {
        bytes.extend_from_slice(&p.x.to_le_bytes());
        bytes.extend_from_slice(&p.y.to_le_bytes());
        bytes.extend_from_slice(&p.z.to_le_bytes());
        bytes.extend_from_slice(&p.r.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a `<id>.label` file: packed little-endian u32 per point, lower 16
/// bits semantic id, upper 16 bits instance id.
pub fn read_labels(path: &Path, table: &RemapTable) -> Result<LabelArray> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound {
            path: path.to_path_buf(),
        },
        _ => Error::Io(e),
    })?;
    if bytes.len() % 4 != 0 {
        return Err(Error::MalformedFile {
            path: path.to_path_buf(),
            detail: format!("size {} is not a multiple of 4", bytes.len()),
        });
    }
    let n = bytes.len() / 4;
    let mut raw_labels = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let raw = u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
        let semantic = raw & 0xFFFF;
        let mapped = table.remap(semantic).ok_or(Error::UnknownLabel {
            path: path.to_path_buf(),
            offset: i,
            raw: semantic,
        })?;
        raw_labels.push(raw);
        labels.push(mapped);
    }
    Ok(LabelArray { labels, raw_labels })
}

pub fn write_labels(labels: &LabelArray, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(labels.raw_labels.len() * 4);
    for raw in &labels.raw_labels {
        bytes.extend_from_slice(&raw.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a KITTI `poses.txt`: one row-major 3x4 `[R|t]` per line.
pub fn read_poses(path: &Path) -> Result<Vec<Pose>> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound {
            path: path.to_path_buf(),
        },
        _ => Error::Io(e),
    })?;
    parse_poses(&text, path)
}

pub fn parse_poses(text: &str, path: &Path) -> Result<Vec<Pose>> {
    let mut poses = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().map_err(|_| Error::MalformedLine {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    detail: format!("unparseable number {tok:?}"),
                })
            })
            .collect::<Result<_>>()?;
        if vals.len() != 12 {
            return Err(Error::MalformedLine {
                path: path.to_path_buf(),
                line: lineno + 1,
                detail: format!("expected 12 values, found {}", vals.len()),
            });
        }
        poses.push(Pose {
            rotation: [
                [vals[0], vals[1], vals[2]],
                [vals[4], vals[5], vals[6]],
                [vals[8], vals[9], vals[10]],
            ],
            translation: [vals[3], vals[7], vals[11]],
        });
    }
    Ok(poses)
}

pub fn write_poses(poses: &[Pose], path: &Path) -> Result<()> {
    let mut out = String::new();
    for p in poses {
        let r = &p.rotation;
        let t = &p.translation;
        out.push_str(&format!(
            "{:e} {:e} {:e} {:e} {:e} {:e} {:e} {:e} {:e} {:e} {:e} {:e}\n",
            r[0][0], r[0][1], r[0][2], t[0], r[1][0], r[1][1], r[1][2], t[1], r[2][0], r[2][1],
            r[2][2], t[2]
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Maps every point into the pose's target frame; intensities pass through.
pub fn apply_pose(frame: &Frame, pose: &Pose) -> Result<Frame> {
    pose.validate()?;
    let points = frame
        .points
        .iter()
        .map(|p| {
            let [x, y, z] = pose.transform([p.x as f64, p.y as f64, p.z as f64]);
            Point {
                x: x as f32,
                y: y as f32,
                z: z as f32,
                r: p.r,
            }
        })
        .collect();
    Ok(Frame {
        points,
        frame_id: frame.frame_id,
    })
}
