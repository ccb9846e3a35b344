//! Per-point combined feature vectors from the current frame and its K
//! aligned predecessors.
//!
//! Per point the layout is, for each history frame from t-1 back to t-K:
//! `[dx, dy, dz, r_neighbor, d, neighbor scores (q)]`, followed by
//! `[r_current, current scores (q)]`, giving width `(q+5)K + q + 1`
//! (71 for q = 20, K = 2).

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::frame_io::{apply_pose, Frame, Pose};
use crate::knn::SpatialIndex;

pub const SCORE_MAGIC: &[u8; 4] = b"P2SC";
pub const FEATURE_MAGIC: &[u8; 4] = b"P2FT";

/// Per-point class-probability rows (n x q). Every row sums to 1 within
/// 1e-4 and entries lie in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    n: usize,
    q: u16,
    data: Vec<f32>,
}

impl ScoreMatrix {
    pub fn new(n: usize, q: u16, data: Vec<f32>) -> Result<Self> {
        if q < 2 {
            return Err(Error::InvalidConfig {
                detail: format!("class count {q} must be at least 2"),
            });
        }
        if data.len() != n * q as usize {
            return Err(Error::ShapeError {
                detail: format!("{n}x{q} scores need {} values, got {}", n * q as usize, data.len()),
            });
        }
        let m = ScoreMatrix { n, q, data };
        for i in 0..n {
            let row = m.row(i);
            let mut sum = 0.0f64;
            for &v in row {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::InvalidData {
                        path: Default::default(),
                        detail: format!("score {v} at row {i} outside [0,1]"),
                    });
                }
                sum += v as f64;
            }
            if (sum - 1.0).abs() > 1e-4 {
                return Err(Error::InvalidData {
                    path: Default::default(),
                    detail: format!("row {i} sums to {sum:.6}"),
                });
            }
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn classes(&self) -> u16 {
        self.q
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.q as usize..(i + 1) * self.q as usize]
    }

    pub fn values(&self) -> &[f32] {
        &self.data
    }

    /// Per-row argmax; ties break to the lowest class id.
    pub fn argmax_labels(&self) -> Vec<u16> {
        (0..self.n)
            .map(|i| {
                let row = self.row(i);
                let mut best = 0usize;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best as u16
            })
            .collect()
    }
}

/// Reads a `.p2sc` score file: magic, u32 n, u32 q, then n*q little-endian f32.
pub fn read_scores(path: &Path) -> Result<ScoreMatrix> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound {
            path: path.to_path_buf(),
        },
        _ => Error::Io(e),
    })?;
    let (n, q, payload) = read_blob_header(&bytes, SCORE_MAGIC, path)?;
    ScoreMatrix::new(n, q as u16, payload)
}

pub fn write_scores(scores: &ScoreMatrix, path: &Path) -> Result<()> {
    fs::write(
        path,
        blob_bytes(SCORE_MAGIC, scores.n, scores.q as u32, &scores.data),
    )?;
    Ok(())
}

fn blob_bytes(magic: &[u8; 4], n: usize, cols: u32, data: &[f32]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(12 + data.len() * 4);
    bytes.extend_from_slice(magic);
    bytes.extend_from_slice(&(n as u32).to_le_bytes());
    bytes.extend_from_slice(&cols.to_le_bytes());
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

fn read_blob_header(bytes: &[u8], magic: &[u8; 4], path: &Path) -> Result<(usize, u32, Vec<f32>)> {
    let err = |detail: String| Error::MalformedFile {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 12 {
        return Err(err("truncated header".into()));
    }
    if &bytes[0..4] != magic {
        return Err(err(format!(
            "bad magic {:?}, expected {:?}",
            &bytes[0..4],
            magic
        )));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let expect = 12 + n * cols as usize * 4;
    if bytes.len() != expect {
        return Err(err(format!("size {} but header implies {expect}", bytes.len())));
    }
    let payload = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((n, cols, payload))
}

/// Combined feature rows for one frame, one row per current-frame point.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedFrame {
    n: usize,
    q: u16,
    history: u16,
    data: Vec<f32>,
}

/// Feature width for `q` classes and `k` history frames.
pub fn feature_width(q: u16, k: u16) -> usize {
    (q as usize + 5) * k as usize + q as usize + 1
}

impl FusedFrame {
    /// Wraps a raw row-major buffer; the length must match the width law.
    pub fn from_raw(n: usize, q: u16, k: u16, data: Vec<f32>) -> Result<Self> {
        let width = feature_width(q, k);
        if data.len() != n * width {
            return Err(Error::ShapeError {
                detail: format!(
                    "{n} rows of width {width} need {} values, got {}",
                    n * width,
                    data.len()
                ),
            });
        }
        Ok(FusedFrame {
            n,
            q,
            history: k,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn classes(&self) -> u16 {
        self.q
    }

    pub fn history(&self) -> u16 {
        self.history
    }

    pub fn width(&self) -> usize {
        feature_width(self.q, self.history)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let w = self.width();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn values(&self) -> &[f32] {
        &self.data
    }
}

/// Fuses the current frame with `history` = [(frame t-1, scores), (t-2, ...), ...],
/// most recent first. All frames must already share one coordinate system.
pub fn fuse(
    current: &Frame,
    current_scores: &ScoreMatrix,
    history: &[(Frame, ScoreMatrix)],
) -> Result<FusedFrame> {
    if history.is_empty() {
        return Err(Error::EmptyInput);
    }
    let q = current_scores.classes();
    if current_scores.rows() != current.len() {
        return Err(Error::ShapeError {
            detail: format!(
                "current frame has {} points but scores have {} rows",
                current.len(),
                current_scores.rows()
            ),
        });
    }
    for (u, (frame, scores)) in history.iter().enumerate() {
        if frame.is_empty() {
            return Err(Error::EmptyTarget);
        }
        if scores.rows() != frame.len() {
            return Err(Error::ShapeError {
                detail: format!(
                    "history frame {u} has {} points but scores have {} rows",
                    frame.len(),
                    scores.rows()
                ),
            });
        }
        if scores.classes() != q {
            return Err(Error::ShapeError {
                detail: format!(
                    "history frame {u} has q={} but current has q={q}",
                    scores.classes()
                ),
            });
        }
    }
    let k = history.len() as u16;
    let width = feature_width(q, k);
    let indices: Vec<SpatialIndex> = history
        .iter()
        .map(|(frame, _)| SpatialIndex::build(frame))
        .collect::<Result<_>>()?;

    let mut data = vec![0.0f32; current.len() * width];
    data.par_chunks_mut(width)
        .zip(current.points.par_iter().enumerate())
        .for_each(|(row, (i, p))| {
            let mut at = 0;
            for (index, (frame, scores)) in indices.iter().zip(history) {
                let hit = index.query_nearest(p.coords());
                let nb = frame.points[hit.target_index];
                row[at] = nb.x - p.x;
                row[at + 1] = nb.y - p.y;
                row[at + 2] = nb.z - p.z;
                row[at + 3] = nb.r;
                row[at + 4] = hit.distance as f32;
                row[at + 5..at + 5 + q as usize].copy_from_slice(scores.row(hit.target_index));
                at += q as usize + 5;
            }
            row[at] = p.r;
            row[at + 1..at + 1 + q as usize].copy_from_slice(current_scores.row(i));
        });

    Ok(FusedFrame {
        n: current.len(),
        q,
        history: k,
        data,
    })
}

/// How frames with fewer than K predecessors are handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StartPolicy {
    /// Drop them (training).
    Skip,
    /// Reuse the oldest available frame for the missing slots (inference).
    /// The first frame has no predecessor at all and is always dropped.
    Pad,
}

/// Aligns each frame by its pose and fuses frame t against frames t-1..t-K.
/// Returns `(frame position in the sequence, fused features)` pairs.
pub fn fuse_sequence(
    sequence: &[(Frame, Pose, ScoreMatrix)],
    k: u16,
    policy: StartPolicy,
) -> Result<Vec<(usize, FusedFrame)>> {
    if sequence.is_empty() {
        return Err(Error::EmptyInput);
    }
    if k == 0 {
        return Err(Error::InvalidConfig {
            detail: "history depth K must be at least 1".into(),
        });
    }
    let aligned: Vec<Frame> = sequence
        .iter()
        .map(|(frame, pose, _)| apply_pose(frame, pose))
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for t in 0..sequence.len() {
        let first = match policy {
            StartPolicy::Skip => {
                if t < k as usize {
                    continue;
                }
                t - k as usize
            }
            StartPolicy::Pad => {
                if t == 0 {
                    continue;
                }
                t.saturating_sub(k as usize)
            }
        };
        let history: Vec<(Frame, ScoreMatrix)> = (1..=k as usize)
            .map(|back| {
                let u = t.saturating_sub(back).max(first);
                (aligned[u].clone(), sequence[u].2.clone())
            })
            .collect();
        out.push((t, fuse(&aligned[t], &sequence[t].2, &history)?));
    }
    Ok(out)
}

/// Reads a `.p2ft` fused-feature cache file.
pub fn read_features(path: &Path, q: u16, k: u16) -> Result<FusedFrame> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound {
            path: path.to_path_buf(),
        },
        _ => Error::Io(e),
    })?;
    let (n, width, data) = read_blob_header(&bytes, FEATURE_MAGIC, path)?;
    if width as usize != feature_width(q, k) {
        return Err(Error::ShapeError {
            detail: format!(
                "feature width {width} does not match q={q}, K={k} (expected {})",
                feature_width(q, k)
            ),
        });
    }
    Ok(FusedFrame {
        n,
        q,
        history: k,
        data,
    })
}

pub fn write_features(fused: &FusedFrame, path: &Path) -> Result<()> {
    fs::write(
        path,
        blob_bytes(FEATURE_MAGIC, fused.n, fused.width() as u32, &fused.data),
    )?;
    Ok(())
}
