//! Autoregressive generation under user controls, and motion transfer.

use log::warn;

use crate::control::{binarize, ControlParams};
use crate::data::Frame;
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::model::Model;

#[derive(Clone, Debug)]
pub struct Rollout {
    /// Generated frames, one per control.
    pub frames: Vec<Frame>,
    /// Hard masks the generator was conditioned on.
    pub control_masks: Vec<Mask>,
    /// Soft masks of the frames each control was applied to.
    pub source_masks: Vec<Mask>,
}

/// `f^{t+1} = G(f^t, apply(control_t, M(f^t)))` for each control in turn.
pub fn rollout(model: &Model, f0: &Frame, controls: &[ControlParams]) -> Result<Rollout> {
    model.check_frame(f0)?;
    let mut frame = f0.clone();
    let mut mask = model.predict_mask(&frame)?;
    let mut out = Rollout { frames: Vec::new(), control_masks: Vec::new(), source_masks: Vec::new() };
    for control in controls {
        let step = model.advance(&frame, &mask, control)?;
        out.source_masks.push(mask);
        out.control_masks.push(step.control_mask);
        out.frames.push(step.frame.clone());
        frame = step.frame;
        mask = step.mask;
    }
    Ok(out)
}

/// Drives `target_f0` with the masks of `driving[1..]`, used as
/// non-parametric controls.
pub fn mimic(model: &Model, driving: &[Frame], target_f0: &Frame) -> Result<Rollout> {
    model.check_frame(target_f0)?;
    if driving.len() < 2 {
        return Err(Error::InvalidInput("driving clip needs at least two frames".into()));
    }
    let mut controls = Vec::with_capacity(driving.len() - 1);
    for f in &driving[1..] {
        if f.height() != target_f0.height() || f.width() != target_f0.width() {
            return Err(Error::Shape(format!(
                "driving frame is {}x{}, target is {}x{}",
                f.height(),
                f.width(),
                target_f0.height(),
                target_f0.width()
            )));
        }
        controls.push(ControlParams::Nonparam(binarize(&model.predict_mask(f)?)));
    }
    if controls.iter().all(|c| matches!(c, ControlParams::Nonparam(m) if m.is_empty())) {
        warn!("every driving mask is empty; output will be near-static");
    }
    rollout(model, target_f0, &controls)
}
