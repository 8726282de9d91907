use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn lcvg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lcvg")).args(args).output().expect("spawn lcvg")
}

fn ok(args: &[&str]) -> String {
    let out = lcvg(args);
    assert!(out.status.success(), "lcvg {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().unwrap() != "run_manifest.json" {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn synth(out: &Path, seed: &str) {
    ok(&[
        "synth-data", "--out", p(out), "--seed", seed, "--clips", "4", "--length", "5", "--height", "32", "--width", "32",
    ]);
}

#[test]
fn synth_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    synth(&a, "3");
    synth(&b, "3");
    synth(&c, "4");
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.len() > 4 * 5);
    assert_eq!(ta, tb);
    assert_ne!(ta, tree(&c));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["seed"], 3);
}

#[test]
fn stage2_without_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "0");
    let out = lcvg(&["train", "--stage", "2", "--data", p(&data), "--out", p(&dir.path().join("run"))]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("requires --from-checkpoint"), "{err}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "0");
    let out = lcvg(&["train", "--stage", "1", "--data", p(&data), "--out", p(&dir.path().join("run")), "--set", "train.itertions=3"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.itertions"));
}

#[test]
fn train_eval_rollout_and_fit() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "1");
    let quick = ["--set", "train.iterations=2", "--set", "train.batch_size=2", "--set", "data.holdout_clips=1"];
    let s1_dir = dir.path().join("s1");
    let mut args = vec!["train", "--stage", "1", "--data", p(&data), "--out", p(&s1_dir)];
    args.extend(quick);
    let s1 = PathBuf::from(ok(&args).trim());
    assert!(s1.exists() && s1_dir.join("metrics.csv").exists() && s1_dir.join("run_manifest.json").exists());

    let s2_dir = dir.path().join("s2");
    let mut args = vec!["train", "--stage", "2", "--data", p(&data), "--out", p(&s2_dir), "--from-checkpoint", p(&s1)];
    args.extend(quick);
    args.extend(["--set", "fit.iterations=20", "--set", "fit.max_residual=1.0"]);
    let s2 = PathBuf::from(ok(&args).trim());
    assert!(s2.ends_with("stage2.lcvg"));

    let eval_dir = dir.path().join("eval");
    ok(&["eval", "--ckpt", p(&s2), "--data", p(&data), "--holdout", "1", "--horizon", "4", "--out", p(&eval_dir)]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval_dir.join("report.json")).unwrap()).unwrap();
    for key in ["rmsed_px", "mean_iou", "mean_psnr", "n_clips"] {
        assert!(report.get(key).is_some(), "report lacks {key}");
    }
    assert_eq!(report["n_clips"], 1);

    let roll = dir.path().join("roll");
    let frame = data.join("clip_0000/000000.png");
    let frame = if frame.exists() { frame } else { first_png(&data) };
    ok(&["rollout", "--checkpoint", p(&s2), "--frame", p(&frame), "--shift", "2,-1", "--steps", "3", "--out", p(&roll)]);
    for i in 1..=3 {
        assert!(roll.join(format!("{i:06}.png")).exists());
        assert!(roll.join(format!("control_masks/{i:06}.png")).exists());
    }

    // fit between two saved control masks: a shift of (2, -1) each step
    let fit = ok(&[
        "fit-control",
        "--from",
        p(&roll.join("control_masks/000001.png")),
        "--to",
        p(&roll.join("control_masks/000002.png")),
        "--mode",
        "positional",
    ]);
    let v: serde_json::Value = serde_json::from_str(&fit).unwrap();
    assert_eq!(v["control"]["mode"], "positional");
    assert!(v["residual"].as_f64().unwrap().is_finite());
}

fn first_png(root: &Path) -> PathBuf {
    let mut stack = vec![root.to_path_buf()];
    let mut found = Vec::new();
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "png") && !path.to_string_lossy().contains("mask") {
                found.push(path);
            }
        }
    }
    found.sort();
    found.into_iter().next().expect("a frame png")
}

#[test]
fn errors_are_single_line() {
    let out = lcvg(&["eval", "--checkpoint", "/nonexistent/model.lcvg", "--data", "/nonexistent"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = err.lines().filter(|l| l.starts_with("error:")).collect();
    assert_eq!(lines.len(), 1, "{err}");
}
