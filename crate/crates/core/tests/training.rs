use std::fs;
use std::path::Path;

use lcvg_core::checkpoint::{load_model, Checkpoint};
use lcvg_core::config::TrainConfig;
use lcvg_core::data::{generate_sprite_dataset, FrameDataset, SpriteConfig};
use lcvg_core::evaluate::{evaluate, EvalConfig};
use lcvg_core::trainer::Trainer;

fn small_data(dir: &Path, clips: usize) -> FrameDataset {
    let cfg = SpriteConfig {
        height: 32,
        width: 32,
        radius_min: 4.0,
        radius_max: 6.0,
        displacement_min: 1.0,
        displacement_max: 3.0,
        clip_length: 5,
        clip_count: clips,
        ..SpriteConfig::default()
    };
    generate_sprite_dataset(&cfg, dir).unwrap();
    FrameDataset::load(dir).unwrap()
}

fn cfg(stage: u8, iterations: usize) -> TrainConfig {
    let mut c = TrainConfig { stage, iterations, batch_size: 4, checkpoint_every: 0, lr: 4e-4, ..TrainConfig::default() };
    c.loss.gan.warmup_iters = 1000;
    c.fit.iterations = 30;
    c.fit_max_residual = 1.0;
    c
}

fn read_totals(path: &Path) -> Vec<f64> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .filter_map(|l| {
            let parts: Vec<&str> = l.split(',').collect();
            (parts.get(1) == Some(&"total")).then(|| parts[2].parse().unwrap())
        })
        .collect()
}

#[test]
fn smoke_run_reduces_loss() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(&dir.path().join("data"), 8);
    let mut t = Trainer::new(cfg(1, 50), &data, None).unwrap();
    let out = dir.path().join("run");
    let path = t.run(&out).unwrap();
    assert!(path.ends_with("stage1.lcvg"));
    let totals = read_totals(&out.join("metrics.csv"));
    assert_eq!(totals.len(), 50);
    let early: f64 = totals[..10].iter().sum::<f64>() / 10.0;
    let late: f64 = totals[40..].iter().sum::<f64>() / 10.0;
    assert!(late <= early, "loss went from {early} to {late}");
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(&dir.path().join("data"), 4);
    let mut straight = Trainer::new(cfg(1, 6), &data, None).unwrap();
    let full = straight.run(&dir.path().join("a")).unwrap();

    let mut first = Trainer::new(cfg(1, 3), &data, None).unwrap();
    let half = first.run(&dir.path().join("b")).unwrap();
    let ckpt = Checkpoint::load(&half).unwrap();
    assert_eq!(ckpt.meta.iteration, 3);
    let mut second = Trainer::new(cfg(1, 6), &data, Some(&ckpt)).unwrap();
    let resumed = second.run(&dir.path().join("b")).unwrap();

    let a = Checkpoint::load(&full).unwrap();
    let b = Checkpoint::load(&resumed).unwrap();
    assert_eq!(a.meta.iteration, 6);
    assert_eq!(a.tensors.keys().collect::<Vec<_>>(), b.tensors.keys().collect::<Vec<_>>());
    for (name, t) in &a.tensors {
        assert!(t.equal(&b.tensors[name]), "{name} differs after resume");
    }
    // metrics appended across the resume
    assert_eq!(read_totals(&dir.path().join("b/metrics.csv")).len(), 6);
}

#[test]
fn stage2_keeps_masknet_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(&dir.path().join("data"), 6);
    let (train, held) = data.split(2).unwrap();
    let s1 = Trainer::new(cfg(1, 4), &train, None).unwrap().run(&dir.path().join("s1")).unwrap();
    let init = Checkpoint::load(&s1).unwrap();
    let s2 = Trainer::new(cfg(2, 3), &train, Some(&init)).unwrap().run(&dir.path().join("s2")).unwrap();
    let (m1, _) = load_model(&s1).unwrap();
    let (m2, meta) = load_model(&s2).unwrap();
    assert_eq!(meta.stage, 2);
    assert_eq!(m1.masknet_hash(), m2.masknet_hash());
    assert_eq!(meta.masknet_hash, m1.masknet_hash());

    let out = evaluate(&m2, &held, &EvalConfig { horizon: 4, max_clips: None, static_clips: 1 }).unwrap();
    assert_eq!(out.report.n_clips, 2);
    assert!((0.0..=1.0).contains(&out.report.mean_iou));
    assert!(out.report.rmsed_px.is_finite() && out.background_change.is_finite());
    assert_eq!(out.per_clip_rmsed.len(), 2);
}

#[test]
fn same_seed_gives_identical_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(&dir.path().join("data"), 4);
    let mut c = cfg(1, 100);
    c.batch_size = 2;
    for run in ["a", "b"] {
        Trainer::new(c.clone(), &data, None).unwrap().run(&dir.path().join(run)).unwrap();
    }
    let a = fs::read_to_string(dir.path().join("a/metrics.csv")).unwrap();
    let b = fs::read_to_string(dir.path().join("b/metrics.csv")).unwrap();
    assert_eq!(read_totals(&dir.path().join("a/metrics.csv")).len(), 100);
    assert!(a == b, "loss logs differ between identical runs");
}
