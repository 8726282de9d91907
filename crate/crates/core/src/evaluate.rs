//! Held-out evaluation: mask quality, positional-control precision,
//! background stability and one-step reconstruction quality.

use serde::{Deserialize, Serialize};

use crate::control::{binarize, compose_masks, ControlParams};
use crate::data::{Frame, FrameDataset};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::metrics::{mask_centroid, mask_iou, psnr, rmsed, EvalReport};
use crate::model::Model;
use crate::rollout::rollout;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Generated frames per rollout.
    pub horizon: usize,
    /// Evaluate at most this many clips.
    pub max_clips: Option<usize>,
    /// Clips that additionally get a static (identity-control) rollout.
    pub static_clips: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { horizon: 16, max_clips: None, static_clips: 10 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub report: EvalReport,
    /// Mean absolute change per step outside the union of the current hard
    /// mask and the control mask, in `[-1, 1]` units.
    pub background_change: f64,
    /// Mean absolute change per step under identity controls.
    pub static_change: f64,
    /// Mean soft mask value over the evaluated real frames.
    pub mean_mask: f64,
    /// Generated frames whose predicted mask came out empty.
    pub empty_generated: usize,
    pub per_clip_rmsed: Vec<f64>,
    /// Mean measured x-shift of the first step for clips commanded to move right.
    pub first_step_dx: Option<(f64, f64)>,
}

fn union_outside_change(prev: &Frame, next: &Frame, a: &Mask, b: &Mask) -> Result<f64> {
    let u = compose_masks(&[binarize(a), binarize(b)])?;
    let (h, w) = (prev.height(), prev.width());
    let (mut s, mut n) = (0.0f64, 0usize);
    for y in 0..h {
        for x in 0..w {
            if u.get(y, x) >= 0.5 {
                continue;
            }
            for c in 0..3 {
                s += (next.get(y, x, c) - prev.get(y, x, c)).abs() as f64;
            }
            n += 3;
        }
    }
    Ok(if n == 0 { 0.0 } else { s / n as f64 })
}

pub fn evaluate(model: &Model, data: &FrameDataset, cfg: &EvalConfig) -> Result<EvalOutcome> {
    if cfg.horizon == 0 {
        return Err(Error::Config("evaluation horizon must be positive".into()));
    }
    let n_clips = cfg.max_clips.unwrap_or(data.clips.len()).min(data.clips.len());
    let (mut iou_sum, mut iou_n) = (0.0, 0usize);
    let (mut mask_sum, mut mask_n) = (0.0, 0usize);
    let (mut psnr_sum, mut psnr_n) = (0.0, 0usize);
    let (mut bg_sum, mut bg_n) = (0.0, 0usize);
    let (mut static_sum, mut static_n) = (0.0, 0usize);
    let mut all_gt = Vec::new();
    let mut all_gen = Vec::new();
    let mut per_clip = Vec::new();
    let mut empty = 0usize;
    let (mut shift_sum, mut shift_cmd, mut shift_n) = (0.0, 0.0, 0usize);

    for clip in &data.clips[..n_clips] {
        let frames = (0..clip.len()).map(|t| clip.frame(t)).collect::<Result<Vec<_>>>()?;
        let masks = frames.iter().map(|f| model.predict_mask(f)).collect::<Result<Vec<_>>>()?;
        for (t, m) in masks.iter().enumerate() {
            mask_sum += m.mean();
            mask_n += 1;
            if let Some(gt) = clip.gt_mask(t) {
                iou_sum += mask_iou(&binarize(m), &gt)?;
                iou_n += 1;
            }
        }

        let Some(centers) = &clip.centers else { continue };
        if centers.len() < cfg.horizon + 1 {
            continue;
        }
        let controls: Vec<ControlParams> = (0..cfg.horizon)
            .map(|t| ControlParams::Positional {
                dx: (centers[t + 1].0 - centers[t].0) as f64,
                dy: (centers[t + 1].1 - centers[t].1) as f64,
            })
            .collect();

        for t in 0..cfg.horizon {
            let step = model.advance(&frames[t], &masks[t], &controls[t])?;
            let p = psnr(&step.frame, &frames[t + 1])?;
            psnr_sum += p.min(100.0);
            psnr_n += 1;
        }

        let r = rollout(model, &frames[0], &controls)?;
        let mut gen = Vec::with_capacity(cfg.horizon);
        let mut gt = Vec::with_capacity(cfg.horizon);
        let mut last = mask_centroid(&binarize(&masks[0])).unwrap_or((centers[0].0 as f64, centers[0].1 as f64));
        let mut prev = frames[0].clone();
        for (t, f) in r.frames.iter().enumerate() {
            let m = binarize(&model.predict_mask(f)?);
            let loc = match mask_centroid(&m) {
                Ok(c) => c,
                Err(_) => {
                    empty += 1;
                    last
                }
            };
            if t == 0 {
                if let ControlParams::Positional { dx, .. } = controls[0] {
                    if dx >= 2.0 {
                        shift_sum += loc.0 - last.0;
                        shift_cmd += dx;
                        shift_n += 1;
                    }
                }
            }
            last = loc;
            gen.push(loc);
            gt.push((centers[t + 1].0 as f64, centers[t + 1].1 as f64));
            bg_sum += union_outside_change(&prev, f, &r.source_masks[t], &r.control_masks[t])?;
            bg_n += 1;
            prev = f.clone();
        }
        per_clip.push(rmsed(&gt, &gen)?);
        all_gt.extend(gt);
        all_gen.extend(gen);

        if per_clip.len() <= cfg.static_clips {
            let s = rollout(model, &frames[0], &vec![ControlParams::identity(); cfg.horizon])?;
            let mut prev = frames[0].clone();
            for f in &s.frames {
                static_sum += f.mean_abs_diff(&prev)?;
                static_n += 1;
                prev = f.clone();
            }
        }
    }

    let mean = |s: f64, n: usize| if n == 0 { f64::NAN } else { s / n as f64 };
    let rmsed_px = if all_gt.is_empty() { f64::NAN } else { rmsed(&all_gt, &all_gen)? };
    Ok(EvalOutcome {
        report: EvalReport {
            rmsed_px,
            rmsed_norm: rmsed_px / data.width as f64,
            mean_iou: mean(iou_sum, iou_n),
            mean_psnr: mean(psnr_sum, psnr_n),
            n_clips,
        },
        background_change: mean(bg_sum, bg_n),
        static_change: mean(static_sum, static_n),
        mean_mask: mean(mask_sum, mask_n),
        empty_generated: empty,
        per_clip_rmsed: per_clip,
        first_step_dx: (shift_n > 0).then(|| (shift_sum / shift_n as f64, shift_cmd / shift_n as f64)),
    })
}

/// Mean soft mask value over every frame of every clip.
pub fn mean_mask_value(model: &Model, data: &FrameDataset, max_clips: usize) -> Result<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for clip in data.clips.iter().take(max_clips) {
        for t in 0..clip.len() {
            s += model.predict_mask(&clip.frame(t)?)?.mean();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidInput("no frames to evaluate".into()));
    }
    Ok(s / n as f64)
}
