//! Command-level tests: exit codes, output staging, and a small end-to-end
//! run through the binary.

use std::path::Path;
use std::process::{Command, Output};

fn p2net(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_p2net"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_pipeline_small_scene() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let fused = dir.path().join("fused");
    let model = dir.path().join("model");
    let refined = dir.path().join("refined");
    let eval = dir.path().join("eval");

    let gen = p2net(&[
        "gen",
        "--seed",
        "11",
        "--set",
        "scene.frames=10",
        "--set",
        "scene.points_per_frame=1500",
        "--out",
        path_str(&data),
    ]);
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));
    assert!(data.join("sequences/00/poses.txt").exists());
    assert!(data.join("sequences/00/manifest.json").exists());
    assert!(data.join("remap.txt").exists());

    let root_arg = format!("dataset.root={}", path_str(&data));
    let fuse = p2net(&["fuse", "--set", &root_arg, "--out", path_str(&fused)]);
    assert!(fuse.status.success(), "{}", String::from_utf8_lossy(&fuse.stderr));

    let fused_arg = format!("fuse.root={}", path_str(&fused));
    let train = p2net(&[
        "train",
        "--seed",
        "11",
        "--set",
        &root_arg,
        "--set",
        &fused_arg,
        "--set",
        "split.train=7",
        "--set",
        "train.epochs=4",
        "--set",
        "train.points_per_frame=1500",
        "--out",
        path_str(&model),
    ]);
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    assert!(model.join("model.p2nm").exists());
    assert!(model.join("history.txt").exists());

    let model_arg = format!("model.path={}", path_str(&model.join("model.p2nm")));
    let refine = p2net(&[
        "refine",
        "--set",
        &root_arg,
        "--set",
        &fused_arg,
        "--set",
        &model_arg,
        "--set",
        "split.train=7",
        "--set",
        "split.eval=3",
        "--out",
        path_str(&refined),
    ]);
    assert!(refine.status.success(), "{}", String::from_utf8_lossy(&refine.stderr));

    let pred_arg = format!("eval.pred={}", path_str(&refined.join("00/scores")));
    let eval_out = p2net(&[
        "eval",
        "--set",
        &root_arg,
        "--set",
        &pred_arg,
        "--out",
        path_str(&eval),
    ]);
    assert!(eval_out.status.success(), "{}", String::from_utf8_lossy(&eval_out.stderr));
    let stdout = String::from_utf8_lossy(&eval_out.stdout);
    assert!(stdout.contains("baseline miou="));
    assert!(stdout.contains("prediction miou="));
    assert!(eval.join("before.txt").exists());
    assert!(eval.join("after.txt").exists());
    assert!(eval.join("delta.txt").exists());
    // refined labels also evaluate, exercising the .label route
    let label_pred = format!("eval.pred={}", path_str(&refined.join("00/labels")));
    let eval2 = p2net(&[
        "eval",
        "--set",
        &root_arg,
        "--set",
        &label_pred,
        "--out",
        path_str(&dir.path().join("eval2")),
    ]);
    assert!(eval2.status.success());
}

#[test]
fn eval_of_ground_truth_labels_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let gen = p2net(&[
        "gen",
        "--seed",
        "3",
        "--set",
        "scene.frames=4",
        "--set",
        "scene.points_per_frame=1000",
        "--out",
        path_str(&data),
    ]);
    assert!(gen.status.success());
    let root_arg = format!("dataset.root={}", path_str(&data));
    let pred_arg = format!("eval.pred={}", path_str(&data.join("sequences/00/labels")));
    let eval = p2net(&[
        "eval",
        "--set",
        &root_arg,
        "--set",
        &pred_arg,
        "--out",
        path_str(&dir.path().join("eval")),
    ]);
    assert!(eval.status.success());
    let stdout = String::from_utf8_lossy(&eval.stdout);
    assert!(
        stdout.contains("prediction miou=1.000000"),
        "expected perfect miou, got:\n{stdout}"
    );
}

#[test]
fn missing_inputs_fail_without_partial_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fused");
    let fuse = p2net(&[
        "fuse",
        "--set",
        "dataset.root=/nonexistent/place",
        "--out",
        path_str(&out),
    ]);
    assert!(!fuse.status.success());
    let stderr = String::from_utf8_lossy(&fuse.stderr);
    assert!(stderr.contains("not found"), "stderr: {stderr}");
    assert!(!out.exists(), "failed run must not leave outputs");
    // nothing staged left behind either
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn contradictory_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let gen = p2net(&[
        "gen",
        "--set",
        "scene.frames=3",
        "--set",
        "scene.points_per_frame=1000",
        "--out",
        path_str(&data),
    ]);
    assert!(gen.status.success());
    // K larger than the sequence allows
    let root_arg = format!("dataset.root={}", path_str(&data));
    let out = dir.path().join("fused");
    let fuse = p2net(&[
        "fuse",
        "--set",
        &root_arg,
        "--set",
        "fuse.k=5",
        "--out",
        path_str(&out),
    ]);
    assert!(!fuse.status.success());
    let stderr = String::from_utf8_lossy(&fuse.stderr);
    assert!(stderr.contains("invalid config"), "stderr: {stderr}");
    assert!(!out.exists());

    // bad scene parameters are rejected before any output exists
    let bad = p2net(&[
        "gen",
        "--set",
        "scene.extent=0",
        "--out",
        path_str(&dir.path().join("bad")),
    ]);
    assert!(!bad.status.success());
    assert!(!dir.path().join("bad").exists());
}

#[test]
fn identical_config_and_seed_reproduce_outputs_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &Path| {
        vec![
            "gen".to_string(),
            "--seed".into(),
            "9".into(),
            "--set".into(),
            "scene.frames=4".into(),
            "--set".into(),
            "scene.points_per_frame=1200".into(),
            "--out".into(),
            out.to_str().unwrap().to_string(),
        ]
    };
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let run = Command::new(env!("CARGO_BIN_EXE_p2net"))
            .args(args(out))
            .output()
            .unwrap();
        assert!(run.status.success());
    }
    for rel in [
        "sequences/00/velodyne/000002.bin",
        "sequences/00/labels/000002.label",
        "sequences/00/scores/000002.p2sc",
        "sequences/00/occlusions/000002.occl",
        "sequences/00/poses.txt",
        "remap.txt",
    ] {
        let x = std::fs::read(a.join(rel)).unwrap();
        let y = std::fs::read(b.join(rel)).unwrap();
        assert_eq!(x, y, "{rel} differs between identical runs");
    }
}

#[test]
fn gen_runs_echo_config_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = p2net(&[
        "gen",
        "--seed",
        "21",
        "--set",
        "scene.frames=3",
        "--set",
        "scene.points_per_frame=800",
        "--out",
        path_str(&dir.path().join("data")),
    ]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("seed=21"));
    assert!(stdout.contains("scene.frames=800") || stdout.contains("scene.points_per_frame=800"));
    assert!(stdout.contains("scene.frames=3"));
}

#[test]
fn config_file_with_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("run.cfg");
    std::fs::write(
        &config_path,
        "[scene]\nframes=3\npoints_per_frame=900\n\n[pipeline]\nseed=77\n",
    )
    .unwrap();
    let data = dir.path().join("data");
    let out = p2net(&[
        "gen",
        "--config",
        path_str(&config_path),
        "--set",
        "scene.frames=4",
        "--out",
        path_str(&data),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    // the flag override beats the file; the file's seed is used
    assert!(stdout.contains("scene.frames=4"));
    assert!(stdout.contains("seed=77"));
    let poses = std::fs::read_to_string(data.join("sequences/00/poses.txt")).unwrap();
    assert_eq!(poses.lines().count(), 4);
}
