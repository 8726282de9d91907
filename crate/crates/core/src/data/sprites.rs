//! Desk-scale moving-sprite videos with exact ground truth.
//!
//! Each clip shows one shaded sprite moving at constant velocity over a static
//! value-noise background, reflecting off the frame borders. Ground-truth masks
//! and sprite centers are written next to the frames.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::frame::{check_dims, Frame};
use super::noise::fractal_value_noise;
use super::{ClipRecord, MANIFEST_FILE, MASK_DIR};
use crate::error::{Error, Result};
use crate::mask::Mask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpriteShape {
    Disk,
    Square,
    Triangle,
}

impl SpriteShape {
    /// Half side of the square relative to the radius (equal area with the disk).
    const SQUARE_HALF: f32 = 0.886_226_9;

    /// Radius of the smallest centered circle containing the shape.
    pub fn bounding_radius(self, radius: f32) -> f32 {
        match self {
            SpriteShape::Disk | SpriteShape::Triangle => radius,
            SpriteShape::Square => radius * Self::SQUARE_HALF * std::f32::consts::SQRT_2,
        }
    }

    pub fn analytic_area(self, radius: f32) -> f32 {
        match self {
            SpriteShape::Disk => std::f32::consts::PI * radius * radius,
            SpriteShape::Square => (2.0 * radius * Self::SQUARE_HALF).powi(2),
            SpriteShape::Triangle => 3.0 * 3f32.sqrt() / 4.0 * radius * radius,
        }
    }

    pub fn perimeter(self, radius: f32) -> f32 {
        match self {
            SpriteShape::Disk => 2.0 * std::f32::consts::PI * radius,
            SpriteShape::Square => 8.0 * radius * Self::SQUARE_HALF,
            SpriteShape::Triangle => 3.0 * 3f32.sqrt() * radius,
        }
    }

    /// Whether the pixel center `(x, y)` lies inside the shape centered at `(cx, cy)`.
    pub fn contains(self, radius: f32, cx: f32, cy: f32, x: f32, y: f32) -> bool {
        let (dx, dy) = (x - cx, y - cy);
        match self {
            SpriteShape::Disk => dx * dx + dy * dy <= radius * radius,
            SpriteShape::Square => {
                let h = radius * Self::SQUARE_HALF;
                dx.abs() <= h && dy.abs() <= h
            }
            SpriteShape::Triangle => {
                // Equilateral, apex up, inscribed in the circle of `radius`.
                let bottom = radius * 0.5;
                if dy > bottom || dy < -radius {
                    return false;
                }
                let half_width = (dy + radius) / (1.5 * radius) * (radius * 3f32.sqrt() / 2.0);
                dx.abs() <= half_width
            }
        }
    }
}

impl FromStr for SpriteShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "disk" => Ok(SpriteShape::Disk),
            "square" => Ok(SpriteShape::Square),
            "triangle" => Ok(SpriteShape::Triangle),
            other => Err(Error::Config(format!("unknown sprite shape `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpriteConfig {
    pub height: usize,
    pub width: usize,
    pub shapes: Vec<SpriteShape>,
    pub radius_min: f32,
    pub radius_max: f32,
    /// Per-step displacement magnitude range in pixels.
    pub displacement_min: f32,
    pub displacement_max: f32,
    pub background_seed: u64,
    /// Per-frame global brightness random-walk step bound, in normalized units.
    pub brightness_drift: f32,
    pub clip_length: usize,
    pub clip_count: usize,
    pub seed: u64,
}

impl Default for SpriteConfig {
    fn default() -> Self {
        SpriteConfig {
            height: 64,
            width: 64,
            shapes: vec![SpriteShape::Disk, SpriteShape::Square, SpriteShape::Triangle],
            radius_min: 8.0,
            radius_max: 12.0,
            displacement_min: 2.0,
            displacement_max: 6.0,
            background_seed: 1,
            brightness_drift: 0.01,
            clip_length: 17,
            clip_count: 2000,
            seed: 0,
        }
    }
}

impl SpriteConfig {
    pub fn validate(&self) -> Result<()> {
        check_dims(self.height, self.width).map_err(|e| Error::Config(e.to_string()))?;
        if self.shapes.is_empty() {
            return Err(Error::Config("at least one sprite shape is required".into()));
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max) {
            return Err(Error::Config(format!(
                "sprite radius range [{}, {}] is invalid",
                self.radius_min, self.radius_max
            )));
        }
        let widest = self
            .shapes
            .iter()
            .map(|s| s.bounding_radius(self.radius_max))
            .fold(0.0f32, f32::max);
        let extent = self.height.min(self.width) as f32;
        if 2.0 * widest + 1.0 > extent {
            return Err(Error::Config(format!(
                "sprite (bounding diameter {:.1} px) larger than the {}x{} frame",
                2.0 * widest,
                self.height,
                self.width
            )));
        }
        if !(self.displacement_min >= 0.0 && self.displacement_min <= self.displacement_max) {
            return Err(Error::Config("displacement range is invalid".into()));
        }
        if self.displacement_max > 0.25 * self.width as f32 {
            return Err(Error::Config(format!(
                "displacement {} px exceeds 25% of the frame width",
                self.displacement_max
            )));
        }
        if self.clip_length < 2 || self.clip_count == 0 {
            return Err(Error::Config("need at least one clip of two or more frames".into()));
        }
        if !(0.0..0.5).contains(&self.brightness_drift) {
            return Err(Error::Config("brightness drift must lie in [0, 0.5)".into()));
        }
        Ok(())
    }
}

/// Fully specified single clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipSpec {
    pub shape: SpriteShape,
    pub radius: f32,
    pub start: (f32, f32),
    pub velocity: (f32, f32),
    /// Sprite center color in normalized units.
    pub color: [f32; 3],
    pub background_seed: u64,
    pub brightness_drift: f32,
    pub drift_seed: u64,
}

const PALETTE: [[f32; 3]; 6] = [
    [1.0, 0.25, 0.2],
    [0.25, 0.55, 1.0],
    [1.0, 0.9, 0.2],
    [0.9, 0.3, 1.0],
    [0.2, 1.0, 0.7],
    [1.0, 0.6, 0.1],
];

/// Shading drop from sprite center to edge, in normalized units.
const SHADE_DROP: f32 = 0.7;

impl ClipSpec {
    pub fn sample(cfg: &SpriteConfig, clip_index: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ clip_index as u64);
        let shape = *cfg.shapes.choose(&mut rng).expect("validated non-empty");
        let radius = rng.gen_range(cfg.radius_min..=cfg.radius_max);
        let bound = shape.bounding_radius(radius);
        let start = (
            rng.gen_range(bound..=(cfg.width as f32 - 1.0 - bound)),
            rng.gen_range(bound..=(cfg.height as f32 - 1.0 - bound)),
        );
        let speed = rng.gen_range(cfg.displacement_min..=cfg.displacement_max);
        let angle = rng.gen_range(0.0..std::f32::consts::TAU);
        let color = *PALETTE.choose(&mut rng).expect("non-empty palette");
        ClipSpec {
            shape,
            radius,
            start,
            velocity: (speed * angle.cos(), speed * angle.sin()),
            color,
            background_seed: cfg.background_seed.wrapping_add(clip_index as u64 * 7919),
            brightness_drift: cfg.brightness_drift,
            drift_seed: rng.gen(),
        }
    }

    /// Sprite centers for `length` frames, reflecting off the borders.
    pub fn trajectory(&self, height: usize, width: usize, length: usize) -> Vec<(f32, f32)> {
        let bound = self.shape.bounding_radius(self.radius);
        let (lo_x, hi_x) = (bound, width as f32 - 1.0 - bound);
        let (lo_y, hi_y) = (bound, height as f32 - 1.0 - bound);
        let (mut x, mut y) = self.start;
        let (mut vx, mut vy) = self.velocity;
        let mut out = Vec::with_capacity(length);
        for _ in 0..length {
            out.push((x, y));
            x += vx;
            y += vy;
            if x < lo_x || x > hi_x {
                vx = -vx;
                x = x.clamp(lo_x, hi_x);
            }
            if y < lo_y || y > hi_y {
                vy = -vy;
                y = y.clamp(lo_y, hi_y);
            }
        }
        out
    }
}

fn background(height: usize, width: usize, seed: u64) -> Vec<f32> {
    let base = fractal_value_noise(height, width, seed, 16.0, 3);
    let detail = fractal_value_noise(height, width, seed ^ 0xA5A5, 6.0, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5151);
    let tint: [f32; 3] = [rng.gen_range(-0.08..0.08), rng.gen_range(-0.08..0.08), rng.gen_range(-0.08..0.08)];
    let mut out = Vec::with_capacity(height * width * 3);
    for i in 0..height * width {
        let v = -0.85 + 0.4 * base[i] + 0.12 * detail[i];
        for t in tint {
            out.push(v + t);
        }
    }
    out
}

/// Renders a clip of `length` frames with masks and centers.
pub fn render_clip(spec: &ClipSpec, height: usize, width: usize, length: usize) -> Result<ClipRecord> {
    let bg = background(height, width, spec.background_seed);
    let centers = spec.trajectory(height, width, length);
    let mut drift_rng = ChaCha8Rng::seed_from_u64(spec.drift_seed);
    let mut offset = 0.0f32;
    let mut frames = Vec::with_capacity(length);
    let mut masks = Vec::with_capacity(length);
    for (t, &(cx, cy)) in centers.iter().enumerate() {
        if t > 0 && spec.brightness_drift > 0.0 {
            offset = (offset + drift_rng.gen_range(-spec.brightness_drift..=spec.brightness_drift))
                .clamp(-4.0 * spec.brightness_drift, 4.0 * spec.brightness_drift);
        }
        let mut pixels = bg.clone();
        let mask = Mask::from_fn(height, width, |y, x| spec.shape.contains(spec.radius, cx, cy, x as f32, y as f32));
        for y in 0..height {
            for x in 0..width {
                let idx = (y * width + x) * 3;
                if mask.get(y, x) == 1.0 {
                    let d = ((x as f32 - cx).powi(2) + (y as f32 - cy).powi(2)).sqrt() / spec.radius;
                    for c in 0..3 {
                        pixels[idx + c] = spec.color[c] - SHADE_DROP * d.min(1.25);
                    }
                }
                for c in 0..3 {
                    pixels[idx + c] = (pixels[idx + c] + offset).clamp(-1.0, 1.0);
                }
            }
        }
        frames.push(Frame::new(height, width, pixels)?);
        masks.push(mask);
    }
    ClipRecord::new(frames, Some(masks), Some(centers))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub clip_id: String,
    pub length: usize,
    pub centers: Vec<[f32; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<SpriteShape>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f32>,
}

pub fn clip_id(index: usize) -> String {
    format!("clip_{index:06}")
}

pub fn frame_file_name(t: usize) -> String {
    format!("{t:06}.png")
}

fn write_clip(dir: &Path, clip: &ClipRecord) -> Result<()> {
    let mask_dir = dir.join(MASK_DIR);
    fs::create_dir_all(&mask_dir).map_err(|e| Error::io(&mask_dir, e))?;
    for (t, frame) in clip.frames.iter().enumerate() {
        frame.save_png(&dir.join(frame_file_name(t)))?;
    }
    if let Some(masks) = &clip.gt_masks {
        for (t, m) in masks.iter().enumerate() {
            m.save_png(&mask_dir.join(frame_file_name(t)))?;
        }
    }
    Ok(())
}

/// Writes `config.clip_count` clips under `out`, returning the manifest records.
pub fn generate_sprite_dataset(config: &SpriteConfig, out: &Path) -> Result<Vec<ManifestRecord>> {
    config.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut records = Vec::with_capacity(config.clip_count);
    for i in 0..config.clip_count {
        let spec = ClipSpec::sample(config, i);
        let clip = render_clip(&spec, config.height, config.width, config.clip_length)?;
        let id = clip_id(i);
        write_clip(&out.join(&id), &clip)?;
        records.push(ManifestRecord {
            clip_id: id,
            length: clip.frames.len(),
            centers: clip
                .gt_centers
                .as_ref()
                .map(|c| c.iter().map(|&(x, y)| [x, y]).collect())
                .unwrap_or_default(),
            shape: Some(spec.shape),
            radius: Some(spec.radius),
        });
    }
    let manifest_path: PathBuf = out.join(MANIFEST_FILE);
    let mut file = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    for r in &records {
        let line = serde_json::to_string(r)?;
        writeln!(file, "{line}").map_err(|e| Error::io(&manifest_path, e))?;
    }
    Ok(records)
}
