use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, RgbImage};
use tch::{Kind, Tensor};

use crate::error::{Error, Result};

/// Spatial dimensions must be multiples of this (four 2x downsampling levels).
pub const SPATIAL_MULTIPLE: usize = 16;

pub fn check_dims(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 || height % SPATIAL_MULTIPLE != 0 || width % SPATIAL_MULTIPLE != 0 {
        return Err(Error::Shape(format!(
            "frame size {height}x{width} must be non-zero multiples of {SPATIAL_MULTIPLE}"
        )));
    }
    Ok(())
}

#[inline]
pub fn u8_to_unit(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

#[inline]
pub fn unit_to_u8(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// An RGB frame with values in `[-1, 1]`, stored height-major with
/// interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Frame {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        check_dims(height, width)?;
        if pixels.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "expected {} pixel values for {height}x{width}x3, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite pixel value {bad}")));
        }
        if let Some(bad) = pixels.iter().find(|v| v.abs() > 1.0) {
            return Err(Error::InvalidInput(format!("pixel value {bad} outside [-1, 1]")));
        }
        Ok(Frame { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Frame::new(height, width, vec![value; height * width * 3])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    pub fn from_rgb8(img: &RgbImage) -> Result<Self> {
        let (w, h) = img.dimensions();
        let pixels = img.as_raw().iter().map(|&v| u8_to_unit(v)).collect();
        Frame::new(h as usize, w as usize, pixels)
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let raw = self.pixels.iter().map(|&v| unit_to_u8(v)).collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size matches")
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
        Frame::from_rgb8(&img.to_rgb8())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, ImageFormat::Png)
            .map_err(|source| Error::Image { path: path.to_path_buf(), source })
    }

    pub fn encode_png(&self) -> Vec<u8> {
        let mut buf = Cursor::new(Vec::new());
        self.to_rgb8()
            .write_to(&mut buf, ImageFormat::Png)
            .expect("in-memory png encoding");
        buf.into_inner()
    }

    /// Decodes PNG bytes without checking the frame-size invariant, so callers
    /// can report a size mismatch separately from a decode failure.
    pub fn decode_rgb8(bytes: &[u8]) -> std::result::Result<RgbImage, image::ImageError> {
        Ok(image::load_from_memory(bytes)?.to_rgb8())
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let img = Frame::decode_rgb8(bytes)
            .map_err(|source| Error::Image { path: "<memory>".into(), source })?;
        Frame::from_rgb8(&img)
    }

    /// `[1, 3, H, W]` tensor.
    pub fn to_tensor(&self, kind: Kind) -> Tensor {
        Tensor::from_slice(&self.pixels)
            .view([self.height as i64, self.width as i64, 3])
            .permute([2, 0, 1])
            .unsqueeze(0)
            .to_kind(kind)
            .contiguous()
    }

    /// Stacks frames into a `[N, 3, H, W]` batch.
    pub fn stack(frames: &[&Frame], kind: Kind) -> Result<Tensor> {
        let first = frames
            .first()
            .ok_or_else(|| Error::InvalidInput("cannot stack zero frames".into()))?;
        if frames.iter().any(|f| f.height != first.height || f.width != first.width) {
            return Err(Error::Shape("frames in a batch must share dimensions".into()));
        }
        let parts: Vec<Tensor> = frames.iter().map(|f| f.to_tensor(kind)).collect();
        Ok(Tensor::cat(&parts, 0))
    }

    /// Builds a frame from a `[1, 3, H, W]` or `[3, H, W]` tensor, clamping to `[-1, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.dim() {
            4 if t.size()[0] == 1 => t.squeeze_dim(0),
            3 => t.shallow_clone(),
            _ => return Err(Error::Shape(format!("expected [1,3,H,W] frame tensor, got {:?}", t.size()))),
        };
        let size = t.size();
        if size[0] != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {}", size[0])));
        }
        let hwc = t
            .detach()
            .to_kind(Kind::Float)
            .clamp(-1.0, 1.0)
            .permute([1, 2, 0])
            .contiguous()
            .view([-1]);
        let pixels = Vec::<f32>::try_from(&hwc)?;
        Frame::new(size[1] as usize, size[2] as usize, pixels)
    }

    /// Mean absolute per-element difference.
    pub fn mean_abs_diff(&self, other: &Frame) -> Result<f64> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::Shape("frame sizes differ".into()));
        }
        let total: f64 = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        Ok(total / self.pixels.len() as f64)
    }
}
