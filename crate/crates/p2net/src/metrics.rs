//! Confusion-matrix accumulation, per-class IoU / mIoU, and comparison
//! reports.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// q x q integer counts with ground truth on rows and predictions on columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    q: u16,
    counts: Vec<u64>,
    ignored_points: u64,
}

impl ConfusionMatrix {
    pub fn new(q: u16) -> Self {
        ConfusionMatrix {
            q,
            counts: vec![0; q as usize * q as usize],
            ignored_points: 0,
        }
    }

    pub fn classes(&self) -> u16 {
        self.q
    }

    pub fn count(&self, gt: u16, pred: u16) -> u64 {
        self.counts[gt as usize * self.q as usize + pred as usize]
    }

    pub fn ignored_points(&self) -> u64 {
        self.ignored_points
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.ignored_points
    }

    /// Merge by integer addition; associative and commutative.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.q != other.q {
            return Err(Error::ShapeError {
                detail: format!("cannot merge {}x{} into {}x{}", other.q, other.q, self.q, self.q),
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.ignored_points += other.ignored_points;
        Ok(())
    }
}

/// Tallies `counts[gt][pred]` for every point whose ground truth is not in
/// the ignore set; ignored points are counted separately.
pub fn accumulate(
    cm: &mut ConfusionMatrix,
    pred: &[u16],
    gt: &[u16],
    ignore: &BTreeSet<u16>,
) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeError {
            detail: format!("{} predictions vs {} ground-truth labels", pred.len(), gt.len()),
        });
    }
    let q = cm.q;
    for (&p, &g) in pred.iter().zip(gt) {
        if ignore.contains(&g) {
            cm.ignored_points += 1;
            continue;
        }
        if g >= q || p >= q {
            return Err(Error::ShapeError {
                detail: format!("label ({g}, {p}) outside [0, {q})"),
            });
        }
        cm.counts[g as usize * q as usize + p as usize] += 1;
    }
    Ok(())
}

/// How classes with an empty denominator enter the mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UndefinedIoU {
    /// Drop them from the mean (default benchmark-tool behavior).
    Exclude,
    /// Count them as zero over the full declared class set.
    CountAsZero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IoUReport {
    /// `(class id, IoU)` for every valid class; `None` marks an undefined IoU.
    pub per_class: Vec<(u16, Option<f64>)>,
    pub miou: f64,
    pub evaluated_classes: usize,
}

/// Per-class IoU = TP / (TP + FP + FN) over the requested valid classes.
pub fn miou(
    cm: &ConfusionMatrix,
    valid_classes: &[u16],
    undefined: UndefinedIoU,
) -> Result<IoUReport> {
    if valid_classes.is_empty() {
        return Err(Error::InvalidConfig {
            detail: "valid class set is empty".into(),
        });
    }
    let q = cm.q;
    let mut per_class = Vec::with_capacity(valid_classes.len());
    let mut sum = 0.0;
    let mut defined = 0usize;
    for &c in valid_classes {
        if c >= q {
            return Err(Error::InvalidConfig {
                detail: format!("valid class {c} outside [0, {q})"),
            });
        }
        let tp = cm.count(c, c);
        let row: u64 = (0..q).map(|p| cm.count(c, p)).sum();
        let col: u64 = (0..q).map(|g| cm.count(g, c)).sum();
        let fn_ = row - tp;
        let fp = col - tp;
        let denom = tp + fp + fn_;
        if denom == 0 {
            per_class.push((c, None));
        } else {
            let iou = tp as f64 / denom as f64;
            per_class.push((c, Some(iou)));
            sum += iou;
            defined += 1;
        }
    }
    let (miou, evaluated_classes) = match undefined {
        UndefinedIoU::Exclude => {
            if defined == 0 {
                (0.0, 0)
            } else {
                (sum / defined as f64, defined)
            }
        }
        UndefinedIoU::CountAsZero => (sum / valid_classes.len() as f64, valid_classes.len()),
    };
    Ok(IoUReport {
        per_class,
        miou,
        evaluated_classes,
    })
}

impl IoUReport {
    /// Line-oriented text: `class_<id>_iou=<float|undefined>` then `miou=`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (c, iou) in &self.per_class {
            match iou {
                Some(v) => {
                    let _ = writeln!(out, "class_{c}_iou={v:.6}");
                }
                None => {
                    let _ = writeln!(out, "class_{c}_iou=undefined");
                }
            }
        }
        let _ = writeln!(out, "miou={:.6}", self.miou);
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut per_class = Vec::new();
        let mut miou = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = |detail: String| Error::MalformedLine {
                path: "iou report".into(),
                line: lineno + 1,
                detail,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad("expected key=value".into()))?;
            if key == "miou" {
                miou = Some(value.parse::<f64>().map_err(|_| bad(format!("bad float {value}")))?);
            } else if let Some(rest) = key.strip_prefix("class_") {
                let id = rest
                    .strip_suffix("_iou")
                    .and_then(|s| s.parse::<u16>().ok())
                    .ok_or_else(|| bad(format!("bad class key {key}")))?;
                let iou = if value == "undefined" {
                    None
                } else {
                    Some(value.parse::<f64>().map_err(|_| bad(format!("bad float {value}")))?)
                };
                per_class.push((id, iou));
            } else {
                return Err(bad(format!("unknown key {key}")));
            }
        }
        let miou = miou.ok_or(Error::MalformedFile {
            path: "iou report".into(),
            detail: "missing miou line".into(),
        })?;
        let evaluated_classes = per_class.iter().filter(|(_, v)| v.is_some()).count();
        Ok(IoUReport {
            per_class,
            miou,
            evaluated_classes,
        })
    }
}

/// Per-class and mean differences between two reports (after minus before).
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaReport {
    pub per_class: Vec<(u16, Option<f64>)>,
    pub miou_delta: f64,
}

pub fn compare(before: &IoUReport, after: &IoUReport) -> DeltaReport {
    let mut per_class = Vec::new();
    for (c, b) in &before.per_class {
        let a = after
            .per_class
            .iter()
            .find(|(ac, _)| ac == c)
            .and_then(|(_, v)| *v);
        per_class.push((
            *c,
            match (b, a) {
                (Some(b), Some(a)) => Some(a - b),
                _ => None,
            },
        ));
    }
    DeltaReport {
        per_class,
        miou_delta: after.miou - before.miou,
    }
}

pub const DIFF_CORRECT: u8 = 0;
pub const DIFF_WRONG: u8 = 1;
pub const DIFF_CHANGED: u8 = 2;

/// Per-point correct/wrong codes for visualization export.
pub fn diff_labels(pred: &[u16], gt: &[u16]) -> Result<Vec<u8>> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeError {
            detail: format!("{} predictions vs {} labels", pred.len(), gt.len()),
        });
    }
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(p, g)| if p == g { DIFF_CORRECT } else { DIFF_WRONG })
        .collect())
}

/// Tri-state codes given two prediction passes: points the refinement
/// changed are marked regardless of correctness.
pub fn diff_labels_refined(before: &[u16], after: &[u16], gt: &[u16]) -> Result<Vec<u8>> {
    if before.len() != after.len() || after.len() != gt.len() {
        return Err(Error::ShapeError {
            detail: "before/after/gt lengths differ".into(),
        });
    }
    Ok(before
        .iter()
        .zip(after)
        .zip(gt)
        .map(|((b, a), g)| {
            if b != a {
                DIFF_CHANGED
            } else if a == g {
                DIFF_CORRECT
            } else {
                DIFF_WRONG
            }
        })
        .collect())
}
