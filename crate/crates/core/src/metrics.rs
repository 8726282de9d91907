//! Control precision, mask quality and reconstruction quality.

use serde::{Deserialize, Serialize};

use crate::data::Frame;
use crate::error::{Error, Result};
use crate::mask::Mask;

pub type Trajectory = Vec<(f64, f64)>;

/// Area centroid `(x, y)` of the foreground in pixel coordinates.
pub fn mask_centroid(m: &Mask) -> Result<(f64, f64)> {
    let (mut sx, mut sy, mut s) = (0.0, 0.0, 0.0);
    for y in 0..m.height() {
        for x in 0..m.width() {
            let v = m.get(y, x) as f64;
            sx += v * x as f64;
            sy += v * y as f64;
            s += v;
        }
    }
    if s <= 0.0 {
        return Err(Error::EmptyMask("centroid of an empty mask".into()));
    }
    Ok((sx / s, sy / s))
}

/// Root-mean-square Euclidean displacement between paired locations, in pixels.
pub fn rmsed(gt: &[(f64, f64)], gen: &[(f64, f64)]) -> Result<f64> {
    if gt.is_empty() || gt.len() != gen.len() {
        return Err(Error::Shape(format!("trajectories of length {} and {}", gt.len(), gen.len())));
    }
    let sum: f64 = gt
        .iter()
        .zip(gen)
        .map(|(a, b)| (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2))
        .sum();
    Ok((sum / gt.len() as f64).sqrt())
}

/// Intersection over union of two hard masks; 1 when both are empty.
pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Shape("masks differ in size".into()));
    }
    let (mut inter, mut union) = (0.0, 0.0);
    for (&x, &y) in a.values().iter().zip(b.values()) {
        let (x, y) = (x >= 0.5, y >= 0.5);
        inter += (x && y) as u8 as f64;
        union += (x || y) as u8 as f64;
    }
    Ok(if union == 0.0 { 1.0 } else { inter / union })
}

pub const PSNR_PEAK: f64 = 2.0;

/// Peak signal-to-noise ratio on `[-1, 1]` frames; `+inf` for identical frames.
pub fn psnr(a: &Frame, b: &Frame) -> Result<f64> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::Shape("frames differ in size".into()));
    }
    let mse: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        / a.pixels().len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (PSNR_PEAK * PSNR_PEAK / mse).log10() })
}

/// Evaluation report written by `eval`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rmsed_px: f64,
    pub rmsed_norm: f64,
    pub mean_iou: f64,
    pub mean_psnr: f64,
    pub n_clips: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disk(cx: f64, cy: f64, r: f64) -> Mask {
        Mask::from_fn(32, 32, |y, x| (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r)
    }

    #[test]
    fn centroid_cases() {
        let (x, y) = mask_centroid(&disk(10.0, 12.0, 5.0)).unwrap();
        assert!((x - 10.0).abs() <= 0.5 && (y - 12.0).abs() <= 0.5);
        let two = Mask::from_fn(4, 4, |y, x| y == 0 && (x == 0 || x == 2));
        assert_eq!(mask_centroid(&two).unwrap(), (1.0, 0.0));
        assert!(mask_centroid(&Mask::zeros(4, 4)).is_err());
    }

    #[test]
    fn rmsed_cases() {
        let a = vec![(1.0, 2.0), (3.0, 4.0), (5.0, 5.0)];
        assert_eq!(rmsed(&a, &a).unwrap(), 0.0);
        let shifted: Vec<_> = a.iter().map(|p| (p.0 + 2.0, p.1)).collect();
        assert!((rmsed(&a, &shifted).unwrap() - 2.0).abs() < 1e-12);
        let v = rmsed(&[(0.0, 0.0), (0.0, 0.0)], &[(3.0, 4.0), (0.0, 0.0)]).unwrap();
        assert!((v - 3.5355339).abs() < 1e-6);
        assert!(rmsed(&a, &a[..2]).is_err());
    }

    #[test]
    fn iou_cases() {
        let a = Mask::from_fn(8, 8, |y, x| y < 4 && x < 4);
        let b = Mask::from_fn(8, 8, |y, x| y < 4 && (2..6).contains(&x));
        let c = Mask::from_fn(8, 8, |y, _| y >= 4);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(mask_iou(&a, &c).unwrap(), 0.0);
        assert!((mask_iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(mask_iou(&Mask::zeros(8, 8), &Mask::zeros(8, 8)).unwrap(), 1.0);
    }

    #[test]
    fn psnr_cases() {
        let a = Frame::filled(16, 16, 0.0).unwrap();
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = Frame::filled(16, 16, 0.2).unwrap();
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-4);
        let lo = Frame::filled(16, 16, -1.0).unwrap();
        let hi = Frame::filled(16, 16, 1.0).unwrap();
        assert!(psnr(&lo, &hi).unwrap().abs() < 1e-12);
    }
}
