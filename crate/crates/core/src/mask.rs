use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat};
use tch::{Kind, Tensor};

use crate::error::{Error, Result};

/// A foreground-layer indicator: 1 marks foreground, 0 background.
///
/// Soft masks hold values in `[0, 1]`; hard masks hold exactly 0 or 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    height: usize,
    width: usize,
    values: Vec<f32>,
    hard: bool,
}

impl Mask {
    pub fn soft(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        Self::check_len(height, width, values.len())?;
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!("mask value {bad} outside [0, 1]")));
        }
        Ok(Mask { height, width, values, hard: false })
    }

    pub fn hard(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        Self::check_len(height, width, values.len())?;
        if let Some(bad) = values.iter().find(|v| **v != 0.0 && **v != 1.0) {
            return Err(Error::InvalidInput(format!("hard mask value {bad} is not 0 or 1")));
        }
        Ok(Mask { height, width, values, hard: true })
    }

    pub fn from_fn(height: usize, width: usize, inside: impl Fn(usize, usize) -> bool) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                values.push(if inside(y, x) { 1.0 } else { 0.0 });
            }
        }
        Mask { height, width, values, hard: true }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Mask { height, width, values: vec![0.0; height * width], hard: true }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Mask { height, width, values: vec![1.0; height * width], hard: true }
    }

    fn check_len(height: usize, width: usize, len: usize) -> Result<()> {
        if height == 0 || width == 0 || len != height * width {
            return Err(Error::Shape(format!("expected {} mask values for {height}x{width}, got {len}", height * width)));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn is_hard(&self) -> bool {
        self.hard
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn same_shape(&self, other: &Mask) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.values.len() as f64
    }

    pub fn is_empty(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    /// Grayscale encoding: hard masks map to 0/255, soft masks to `round(255 v)`.
    pub fn to_gray8(&self) -> GrayImage {
        let raw = self.values.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
        GrayImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size matches")
    }

    /// Decodes a grayscale mask; values `>= 128` are foreground.
    pub fn from_gray8(img: &GrayImage) -> Self {
        let (w, h) = img.dimensions();
        let values = img.as_raw().iter().map(|&v| if v >= 128 { 1.0 } else { 0.0 }).collect();
        Mask { height: h as usize, width: w as usize, values, hard: true }
    }

    pub fn encode_png(&self) -> Vec<u8> {
        let mut buf = Cursor::new(Vec::new());
        self.to_gray8()
            .write_to(&mut buf, ImageFormat::Png)
            .expect("in-memory png encoding");
        buf.into_inner()
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes)
            .map_err(|source| Error::Image { path: "<memory>".into(), source })?;
        Ok(Mask::from_gray8(&img.to_luma8()))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_gray8()
            .save_with_format(path, ImageFormat::Png)
            .map_err(|source| Error::Image { path: path.to_path_buf(), source })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
        Ok(Mask::from_gray8(&img.to_luma8()))
    }

    /// `[1, 1, H, W]` tensor.
    pub fn to_tensor(&self, kind: Kind) -> Tensor {
        Tensor::from_slice(&self.values)
            .view([1, 1, self.height as i64, self.width as i64])
            .to_kind(kind)
    }

    pub fn stack(masks: &[&Mask], kind: Kind) -> Result<Tensor> {
        let first = masks
            .first()
            .ok_or_else(|| Error::InvalidInput("cannot stack zero masks".into()))?;
        if masks.iter().any(|m| !m.same_shape(first)) {
            return Err(Error::Shape("masks in a batch must share dimensions".into()));
        }
        let parts: Vec<Tensor> = masks.iter().map(|m| m.to_tensor(kind)).collect();
        Ok(Tensor::cat(&parts, 0))
    }

    /// Soft mask from a `[1, 1, H, W]`, `[1, H, W]` or `[H, W]` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let size = t.size();
        let (h, w) = match size.as_slice() {
            [1, 1, h, w] | [1, h, w] | [h, w] => (*h as usize, *w as usize),
            other => return Err(Error::Shape(format!("expected a single mask tensor, got {other:?}"))),
        };
        let flat = t.detach().to_kind(Kind::Float).contiguous().view([-1]);
        let values = Vec::<f32>::try_from(&flat)?;
        Mask::soft(h, w, values)
    }
}
