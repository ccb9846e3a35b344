//! SemanticKITTI-style dataset layout and atomic output staging.
//!
//! Layout: `<root>/sequences/<id>/velodyne/NNNNNN.bin`, `labels/NNNNNN.label`,
//! `scores/NNNNNN.p2sc`, `occlusions/NNNNNN.occl`, `poses.txt`, plus
//! `<root>/remap.txt` shared by all sequences.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context, Result};
use p2net::frame_io::{self, Frame, Pose};
use p2net::fusion::{read_scores, ScoreMatrix};

pub struct DatasetPaths {
    pub root: PathBuf,
    pub sequence: String,
}

impl DatasetPaths {
    pub fn new(root: impl Into<PathBuf>, sequence: impl Into<String>) -> Self {
        DatasetPaths {
            root: root.into(),
            sequence: sequence.into(),
        }
    }

    pub fn seq_dir(&self) -> PathBuf {
        self.root.join("sequences").join(&self.sequence)
    }

    pub fn velodyne(&self, frame: usize) -> PathBuf {
        self.seq_dir().join("velodyne").join(frame_file(frame, "bin"))
    }

    pub fn label(&self, frame: usize) -> PathBuf {
        self.seq_dir().join("labels").join(frame_file(frame, "label"))
    }

    pub fn score(&self, frame: usize) -> PathBuf {
        self.seq_dir().join("scores").join(frame_file(frame, "p2sc"))
    }

    pub fn occlusion(&self, frame: usize) -> PathBuf {
        self.seq_dir()
            .join("occlusions")
            .join(frame_file(frame, "occl"))
    }

    pub fn poses(&self) -> PathBuf {
        self.seq_dir().join("poses.txt")
    }

    pub fn remap(&self) -> PathBuf {
        self.root.join("remap.txt")
    }
}

pub fn frame_file(frame: usize, ext: &str) -> String {
    format!("{frame:06}.{ext}")
}

/// Frame index from a path stem like `000017`.
pub fn frame_index(path: &Path) -> Option<usize> {
    path.file_stem()?.to_str()?.parse().ok()
}

pub struct LoadedSequence {
    pub frames: Vec<Frame>,
    pub poses: Vec<Pose>,
    pub scores: Vec<ScoreMatrix>,
}

/// Loads every frame the pose file declares.
pub fn load_sequence(paths: &DatasetPaths, with_scores: bool) -> Result<LoadedSequence> {
    let poses = frame_io::read_poses(&paths.poses())?;
    if poses.is_empty() {
        return Err(anyhow!("{} declares no frames", paths.poses().display()));
    }
    let mut frames = Vec::with_capacity(poses.len());
    let mut scores = Vec::new();
    for t in 0..poses.len() {
        frames.push(frame_io::read_frame(&paths.velodyne(t), t as u64)?);
        if with_scores {
            scores.push(read_scores(&paths.score(t))?);
        }
    }
    Ok(LoadedSequence {
        frames,
        poses,
        scores,
    })
}

/// Runs `build` against a temporary sibling of `out`, then atomically moves
/// the result into place. A failed run leaves no partial `out`.
pub fn stage_output<F>(out: &Path, build: F) -> Result<()>
where
    F: FnOnce(&Path) -> Result<()>,
{
    let parent = out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&parent)
        .with_context(|| format!("cannot create {}", parent.display()))?;
    let nonce = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0);
    let stage = parent.join(format!(
        ".stage-{}-{}",
        std::process::id(),
        nonce
    ));
    std::fs::create_dir_all(&stage)?;
    match build(&stage) {
        Ok(()) => {
            if out.exists() {
                std::fs::remove_dir_all(out)
                    .with_context(|| format!("cannot replace {}", out.display()))?;
            }
            std::fs::rename(&stage, out)
                .with_context(|| format!("cannot move staged output to {}", out.display()))?;
            Ok(())
        }
        Err(e) => {
            let _ = std::fs::remove_dir_all(&stage);
            Err(e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn staging_commits_on_success() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("result");
        stage_output(&out, |stage| {
            std::fs::write(stage.join("a.txt"), "hello")?;
            Ok(())
        })
        .unwrap();
        assert_eq!(std::fs::read_to_string(out.join("a.txt")).unwrap(), "hello");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn staging_leaves_nothing_on_failure() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("result");
        let res = stage_output(&out, |stage| {
            std::fs::write(stage.join("partial.txt"), "junk")?;
            Err(anyhow!("boom"))
        });
        assert!(res.is_err());
        assert!(!out.exists());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn staging_replaces_existing_output() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("result");
        std::fs::create_dir_all(&out).unwrap();
        std::fs::write(out.join("old.txt"), "old").unwrap();
        stage_output(&out, |stage| {
            std::fs::write(stage.join("new.txt"), "new")?;
            Ok(())
        })
        .unwrap();
        assert!(!out.join("old.txt").exists());
        assert!(out.join("new.txt").exists());
    }

    #[test]
    fn frame_names() {
        assert_eq!(frame_file(7, "bin"), "000007.bin");
        assert_eq!(frame_index(Path::new("/x/000017.p2sc")), Some(17));
        assert_eq!(frame_index(Path::new("/x/readme.md")), None);
    }
}
