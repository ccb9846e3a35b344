//! The pipeline subcommands: gen, fuse, train, refine, eval, bench.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};

use p2net::frame_io::{self, LabelArray, RemapTable};
use p2net::fusion::{self, FusedFrame, ScoreMatrix};
use p2net::knn;
use p2net::metrics::{self, ConfusionMatrix, UndefinedIoU};
use p2net::refiner::{self, MlpModel};
use p2net::synth;

use crate::config::{self, Config};
use crate::dataset::{frame_file, frame_index, load_sequence, stage_output, DatasetPaths};

fn sequence_name(cfg: &Config) -> String {
    cfg.get("dataset.sequence").unwrap_or("00").to_string()
}

/// Generates a synthetic dataset in the on-disk layout, including oracle
/// scores, occlusion sidecars, and a manifest.
pub fn gen(cfg: &Config, seed: u64, out: &Path) -> Result<()> {
    let scene = config::scene_config(cfg, seed)?;
    let noise = config::noise_config(cfg, seed)?;
    noise.validate(scene.num_classes)?;
    let sequence = sequence_name(cfg);
    let frames = synth::gen_sequence(&scene)?;
    let stats = synth::refinability(&frames)?;
    println!(
        "generated {} frames: occluded fraction {:.3}, refinable fraction {:.3}",
        frames.len(),
        stats.occluded_fraction,
        stats.refinable_fraction
    );

    stage_output(out, |stage| {
        let paths = DatasetPaths::new(stage, &sequence);
        let seq = paths.seq_dir();
        for sub in ["velodyne", "labels", "scores", "occlusions"] {
            fs::create_dir_all(seq.join(sub))?;
        }
        RemapTable::semantic_kitti().save(&paths.remap())?;
        let mut poses = Vec::with_capacity(frames.len());
        for (t, g) in frames.iter().enumerate() {
            frame_io::write_frame(&g.frame, &paths.velodyne(t))?;
            frame_io::write_labels(&g.labels, &paths.label(t))?;
            let scores =
                synth::oracle_scores(&g.frame, &g.labels, &g.occluded, &noise, scene.num_classes)?;
            fusion::write_scores(&scores, &paths.score(t))?;
            let flags: Vec<u8> = g.occluded.iter().map(|&o| o as u8).collect();
            fs::write(paths.occlusion(t), flags)?;
            poses.push(g.pose);
        }
        frame_io::write_poses(&poses, &paths.poses())?;
        let manifest = synth::Manifest {
            scene: scene.clone(),
            noise: noise.clone(),
            stats,
        };
        fs::write(
            seq.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    })
}

/// Fuses every frame of the dataset sequence against its K predecessors and
/// writes the feature cache.
pub fn fuse(cfg: &Config, _seed: u64, out: &Path) -> Result<()> {
    let paths = DatasetPaths::new(cfg.require_path("dataset.root")?, sequence_name(cfg));
    let (k, policy) = config::fuse_settings(cfg)?;
    let data = load_sequence(&paths, true)?;
    if k as usize >= data.frames.len() {
        bail!(
            "invalid config: K={k} needs at least {} frames, dataset has {}",
            k + 1,
            data.frames.len()
        );
    }
    let sequence: Vec<_> = data
        .frames
        .into_iter()
        .zip(data.poses)
        .zip(data.scores)
        .map(|((f, p), s)| (f, p, s))
        .collect();
    let fused = fusion::fuse_sequence(&sequence, k, policy)?;
    println!("fused {} frames (K={k})", fused.len());
    stage_output(out, |stage| {
        let dir = stage.join(&paths.sequence);
        fs::create_dir_all(&dir)?;
        for (t, features) in &fused {
            fusion::write_features(features, &dir.join(frame_file(*t, "p2ft")))?;
        }
        Ok(())
    })
}

/// Lists `(frame index, path)` pairs of a fused-feature directory in index
/// order.
fn fused_entries(dir: &Path) -> Result<Vec<(usize, std::path::PathBuf)>> {
    if !dir.exists() {
        bail!("not found: {} (run the fuse stage first)", dir.display());
    }
    let mut entries = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("p2ft") {
            let idx = frame_index(&path)
                .ok_or_else(|| anyhow!("unparseable frame file {}", path.display()))?;
            entries.push((idx, path));
        }
    }
    entries.sort();
    if entries.is_empty() {
        bail!("no fused frames under {}", dir.display());
    }
    Ok(entries)
}

/// Trains the refiner on the first `split.train` frames of the sequence.
pub fn train(cfg: &Config, seed: u64, out: &Path) -> Result<()> {
    let paths = DatasetPaths::new(cfg.require_path("dataset.root")?, sequence_name(cfg));
    let fused_root = cfg.require_path("fuse.root")?;
    let (k, _) = config::fuse_settings(cfg)?;
    let q: u16 = cfg.get_or("scene.num_classes", 20)?;
    let train_frames: usize = cfg.get_or("split.train", usize::MAX)?;
    let table = if paths.remap().exists() {
        RemapTable::load(&paths.remap())?
    } else {
        RemapTable::semantic_kitti()
    };

    let mut dataset: Vec<(FusedFrame, LabelArray)> = Vec::new();
    for (t, path) in fused_entries(&fused_root.join(&paths.sequence))? {
        if t >= train_frames {
            continue;
        }
        let features = fusion::read_features(&path, q, k)?;
        let labels = frame_io::read_labels(&paths.label(t), &table)?;
        dataset.push((features, labels));
    }
    if dataset.is_empty() {
        bail!("no fused frames below split.train; nothing to train on");
    }
    let tc = config::train_config(cfg, seed)?;
    println!(
        "training on {} frames, {} epochs, lr {:.4}*{}^epoch",
        dataset.len(),
        tc.epochs,
        tc.base_lr,
        tc.lr_decay
    );
    let started = Instant::now();
    let (model, history) = refiner::train(&tc, &dataset)?;
    println!(
        "final epoch loss {:.6} ({:.1}s)",
        history.last().map(|h| h.mean_loss).unwrap_or(f64::NAN),
        started.elapsed().as_secs_f64()
    );
    stage_output(out, |stage| {
        refiner::save_model(&model, &stage.join("model.p2nm"))?;
        let mut text = String::new();
        for h in &history {
            let _ = writeln!(text, "epoch={} lr={:e} loss={:e}", h.epoch, h.lr, h.mean_loss);
        }
        fs::write(stage.join("history.txt"), text)?;
        Ok(())
    })
}

/// Refines the last `split.eval` fused frames and writes score + label
/// files.
pub fn refine(cfg: &Config, _seed: u64, out: &Path) -> Result<()> {
    let paths = DatasetPaths::new(cfg.require_path("dataset.root")?, sequence_name(cfg));
    let fused_root = cfg.require_path("fuse.root")?;
    let model_path = cfg.require_path("model.path")?;
    let (k, _) = config::fuse_settings(cfg)?;
    let model = refiner::load_model(&model_path)?;
    let q = model.num_classes();
    let table = if paths.remap().exists() {
        RemapTable::load(&paths.remap())?
    } else {
        RemapTable::semantic_kitti()
    };

    let entries = fused_entries(&fused_root.join(&paths.sequence))?;
    let eval_count: usize = cfg.get_or("split.eval", entries.len())?;
    let train_frames: usize = cfg.get_or("split.train", 0)?;
    let selected: Vec<_> = entries
        .iter()
        .rev()
        .take(eval_count)
        .rev()
        .cloned()
        .collect();
    if let Some((first, _)) = selected.first() {
        if *first < train_frames {
            bail!(
                "invalid config: evaluation frame {first} overlaps the training split (< {train_frames})"
            );
        }
    }
    println!(
        "refining {} frames with model {} (q={q}, K={})",
        selected.len(),
        model_path.display(),
        model.history()
    );
    stage_output(out, |stage| {
        let scores_dir = stage.join(&paths.sequence).join("scores");
        let labels_dir = stage.join(&paths.sequence).join("labels");
        fs::create_dir_all(&scores_dir)?;
        fs::create_dir_all(&labels_dir)?;
        for (t, path) in &selected {
            let features = fusion::read_features(path, q, k)?;
            let (scores, labels) = model.refine(&features)?;
            fusion::write_scores(&scores, &scores_dir.join(frame_file(*t, "p2sc")))?;
            let raw: Vec<u32> = labels
                .iter()
                .map(|&c| table.raw_for(c).unwrap_or(c as u32))
                .collect();
            let arr = LabelArray {
                labels,
                raw_labels: raw,
            };
            frame_io::write_labels(&arr, &labels_dir.join(frame_file(*t, "label")))?;
        }
        Ok(())
    })
}

/// Predicted labels for one frame from a prediction directory holding either
/// `.label` files or `.p2sc` score files.
fn predicted_labels(dir: &Path, t: usize, table: &RemapTable) -> Result<Option<Vec<u16>>> {
    let label_path = dir.join(frame_file(t, "label"));
    if label_path.exists() {
        return Ok(Some(frame_io::read_labels(&label_path, table)?.labels));
    }
    let score_path = dir.join(frame_file(t, "p2sc"));
    if score_path.exists() {
        return Ok(Some(fusion::read_scores(&score_path)?.argmax_labels()));
    }
    Ok(None)
}

/// Evaluates predictions against ground truth; when the dataset carries its
/// own score files, also reports the baseline and the per-class deltas.
pub fn eval(cfg: &Config, _seed: u64, out: &Path) -> Result<()> {
    let paths = DatasetPaths::new(cfg.require_path("dataset.root")?, sequence_name(cfg));
    let pred_dir = cfg.require_path("eval.pred")?;
    if !pred_dir.exists() {
        bail!("not found: {}", pred_dir.display());
    }
    let table = if paths.remap().exists() {
        RemapTable::load(&paths.remap())?
    } else {
        RemapTable::semantic_kitti()
    };
    let q = table.num_classes();
    let ignore: BTreeSet<u16> = cfg.get_u16_list("eval.ignore", &[0])?.into_iter().collect();
    let valid: Vec<u16> = (0..q).filter(|c| !ignore.contains(c)).collect();
    let mode = match cfg.get("eval.mode").unwrap_or("exclude") {
        "exclude" => UndefinedIoU::Exclude,
        "strict" => UndefinedIoU::CountAsZero,
        other => bail!("eval.mode must be exclude or strict, got {other:?}"),
    };

    let poses = frame_io::read_poses(&paths.poses())?;
    let mut cm_after = ConfusionMatrix::new(q);
    let mut cm_before = ConfusionMatrix::new(q);
    let mut any_baseline = false;
    let mut evaluated = Vec::new();
    // (frame, after codes, optional tri-state codes)
    let mut diffs: Vec<(usize, Vec<u8>, Option<Vec<u8>>)> = Vec::new();
    for t in 0..poses.len() {
        let Some(pred) = predicted_labels(&pred_dir, t, &table)? else {
            continue;
        };
        let gt = frame_io::read_labels(&paths.label(t), &table)?;
        metrics::accumulate(&mut cm_after, &pred, &gt.labels, &ignore)?;
        let mut tri = None;
        let baseline_path = paths.score(t);
        if baseline_path.exists() {
            let baseline = fusion::read_scores(&baseline_path)?.argmax_labels();
            metrics::accumulate(&mut cm_before, &baseline, &gt.labels, &ignore)?;
            tri = Some(metrics::diff_labels_refined(&baseline, &pred, &gt.labels)?);
            any_baseline = true;
        }
        diffs.push((t, metrics::diff_labels(&pred, &gt.labels)?, tri));
        evaluated.push(t);
    }
    if evaluated.is_empty() {
        bail!("no predictions found under {}", pred_dir.display());
    }

    let after = metrics::miou(&cm_after, &valid, mode)?;
    let before = if any_baseline {
        Some(metrics::miou(&cm_before, &valid, mode)?)
    } else {
        None
    };
    println!("evaluated frames {evaluated:?}");
    if let Some(before) = &before {
        println!("baseline miou={:.6}", before.miou);
    }
    println!("prediction miou={:.6}", after.miou);
    if let Some(before) = &before {
        println!("delta miou={:+.6}", after.miou - before.miou);
    }

    stage_output(out, |stage| {
        fs::write(stage.join("after.txt"), after.to_text())?;
        if let Some(before) = &before {
            fs::write(stage.join("before.txt"), before.to_text())?;
            let delta = metrics::compare(before, &after);
            let mut text = String::new();
            for (c, d) in &delta.per_class {
                match d {
                    Some(d) => {
                        let _ = writeln!(text, "class_{c}_delta={d:+.6}");
                    }
                    None => {
                        let _ = writeln!(text, "class_{c}_delta=undefined");
                    }
                }
            }
            let _ = writeln!(text, "miou_delta={:+.6}", delta.miou_delta);
            fs::write(stage.join("delta.txt"), text)?;
        }
        let diff_dir = stage.join("diff");
        fs::create_dir_all(&diff_dir)?;
        for (t, codes, tri) in &diffs {
            fs::write(diff_dir.join(frame_file(*t, "diff")), codes)?;
            if let Some(tri) = tri {
                fs::write(diff_dir.join(frame_file(*t, "tri")), tri)?;
            }
        }
        Ok(())
    })
}

/// Times the pipeline stages per frame on a synthetic scene, echoing a
/// machine-readable report.
pub fn bench(cfg: &Config, seed: u64, out: &Path) -> Result<()> {
    let scene = config::scene_config(cfg, seed)?;
    let noise = config::noise_config(cfg, seed)?;
    let (k, policy) = config::fuse_settings(cfg)?;
    let frames = synth::gen_sequence(&scene)?;
    let q = scene.num_classes;

    let world: Vec<_> = frames
        .iter()
        .map(|g| frame_io::apply_pose(&g.frame, &g.pose))
        .collect::<p2net::Result<_>>()?;
    let scores: Vec<ScoreMatrix> = frames
        .iter()
        .map(|g| synth::oracle_scores(&g.frame, &g.labels, &g.occluded, &noise, q))
        .collect::<p2net::Result<_>>()?;

    // pure nearest-neighbor cost: build K indices per frame, query all
    // points; bench.nn_radius exercises the bounded-search speed knob
    let radius: f64 = cfg.get_or("bench.nn_radius", f64::INFINITY)?;
    let t0 = Instant::now();
    let mut fusable = 0usize;
    for t in k as usize..world.len() {
        let indices: Vec<_> = (1..=k as usize)
            .map(|b| knn::SpatialIndex::build(&world[t - b]))
            .collect::<p2net::Result<_>>()?;
        for p in &world[t].points {
            for index in &indices {
                std::hint::black_box(index.query_nearest_within(p.coords(), radius));
            }
        }
        fusable += 1;
    }
    let nn_ms = t0.elapsed().as_secs_f64() * 1e3 / fusable as f64;

    // full feature assembly
    let sequence: Vec<_> = frames
        .iter()
        .zip(&scores)
        .map(|(g, s)| (g.frame.clone(), g.pose, s.clone()))
        .collect();
    let tb = Instant::now();
    let fused = fusion::fuse_sequence(&sequence, k, policy)?;
    let fuse_ms = tb.elapsed().as_secs_f64() * 1e3 / fused.len() as f64;

    // network inference
    let model = MlpModel::init(q, k, seed)?;
    let tc = Instant::now();
    for (_, features) in &fused {
        std::hint::black_box(model.refine(features)?);
    }
    let refine_ms = tc.elapsed().as_secs_f64() * 1e3 / fused.len() as f64;

    let mut report = String::new();
    let _ = writeln!(report, "frames={}", frames.len());
    let _ = writeln!(report, "points_per_frame={}", scene.points_per_frame);
    let _ = writeln!(report, "history_k={k}");
    let _ = writeln!(report, "nn_search_ms_per_frame={nn_ms:.3}");
    let _ = writeln!(report, "fusion_ms_per_frame={fuse_ms:.3}");
    let _ = writeln!(report, "refine_ms_per_frame={refine_ms:.3}");

    if let Some(sizes) = cfg.get("bench.knn_sizes") {
        let target_sizes: Vec<usize> = sizes
            .split(',')
            .map(|s| s.trim().parse().context("bench.knn_sizes"))
            .collect::<Result<_>>()?;
        let bench_cfg = knn::BenchConfig {
            target_sizes,
            queries: cfg.get_or("bench.knn_queries", 200)?,
            seed,
        };
        report.push_str(&knn::bench_search(&bench_cfg)?.to_text());
    }

    print!("{report}");
    stage_output(out, |stage| {
        fs::write(stage.join("bench.txt"), &report)?;
        Ok(())
    })
}
