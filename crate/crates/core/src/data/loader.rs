use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use tch::{Kind, Tensor};

use super::frame::{check_dims, Frame};
use super::sprites::ManifestRecord;
use super::{MANIFEST_FILE, MASK_DIR};
use crate::error::{Error, Result};
use crate::mask::Mask;

/// A clip held in memory with optional ground truth.
#[derive(Clone, Debug)]
pub struct ClipRecord {
    pub frames: Vec<Frame>,
    pub gt_masks: Option<Vec<Mask>>,
    pub gt_centers: Option<Vec<(f32, f32)>>,
}

impl ClipRecord {
    pub fn new(frames: Vec<Frame>, gt_masks: Option<Vec<Mask>>, gt_centers: Option<Vec<(f32, f32)>>) -> Result<Self> {
        let first = frames.first().ok_or_else(|| Error::InvalidInput("clip has no frames".into()))?;
        let (h, w) = (first.height(), first.width());
        if frames.iter().any(|f| f.height() != h || f.width() != w) {
            return Err(Error::Shape("frames in a clip must share dimensions".into()));
        }
        if let Some(m) = &gt_masks {
            if m.len() != frames.len() || m.iter().any(|m| m.height() != h || m.width() != w) {
                return Err(Error::Shape("ground-truth masks must match the frames".into()));
            }
        }
        if let Some(c) = &gt_centers {
            if c.len() != frames.len() {
                return Err(Error::Shape("ground-truth centers must match the frames".into()));
            }
        }
        Ok(ClipRecord { frames, gt_masks, gt_centers })
    }
}

fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_frame = path.extension().is_some_and(|e| e == "png")
            && path
                .file_stem()
                .and_then(|s| s.to_str())
                .is_some_and(|s| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()));
        if is_frame && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Clip directories under `root`, sorted by name.
fn clip_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

pub fn read_manifest(root: &Path) -> Result<HashMap<String, ManifestRecord>> {
    let path = root.join(MANIFEST_FILE);
    let mut out = HashMap::new();
    if !path.exists() {
        return Ok(out);
    }
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)?;
        out.insert(rec.clip_id.clone(), rec);
    }
    Ok(out)
}

fn open_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })?
        .to_rgb8())
}

fn open_gray(path: &Path) -> Result<GrayImage> {
    Ok(image::open(path)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })?
        .to_luma8())
}

/// Lazily reads consecutive frame pairs, never pairing across clips.
pub struct FramePairs {
    clips: Vec<Vec<PathBuf>>,
    clip: usize,
    t: usize,
    prev: Option<Frame>,
}

impl Iterator for FramePairs {
    type Item = Result<(Frame, Frame)>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let paths = self.clips.get(self.clip)?;
            if self.t + 1 >= paths.len() {
                self.clip += 1;
                self.t = 0;
                self.prev = None;
                continue;
            }
            let a = match self.prev.take() {
                Some(f) => f,
                None => match Frame::load_png(&paths[self.t]) {
                    Ok(f) => f,
                    Err(e) => return Some(Err(e)),
                },
            };
            let b = match Frame::load_png(&paths[self.t + 1]) {
                Ok(f) => f,
                Err(e) => return Some(Err(e)),
            };
            self.t += 1;
            self.prev = Some(b.clone());
            return Some(Ok((a, b)));
        }
    }
}

/// Streams `(f_t, f_{t+1})` pairs from every clip directory under `root`.
pub fn load_frame_pairs(root: &Path) -> Result<FramePairs> {
    let mut clips = Vec::new();
    for dir in clip_dirs(root)? {
        let paths = frame_paths(&dir)?;
        if paths.len() < 2 {
            log::warn!("skipping {}: {} frame(s), need at least 2", dir.display(), paths.len());
            continue;
        }
        clips.push(paths);
    }
    if clips.is_empty() {
        return Err(Error::InvalidInput(format!("{} holds no clip with two or more frames", root.display())));
    }
    Ok(FramePairs { clips, clip: 0, t: 0, prev: None })
}

/// One clip kept in 8-bit form.
#[derive(Clone, Debug)]
pub struct StoredClip {
    pub id: String,
    pub frames: Vec<RgbImage>,
    pub masks: Option<Vec<GrayImage>>,
    pub centers: Option<Vec<(f32, f32)>>,
}

impl StoredClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame(&self, t: usize) -> Result<Frame> {
        Frame::from_rgb8(&self.frames[t])
    }

    pub fn gt_mask(&self, t: usize) -> Option<Mask> {
        self.masks.as_ref().map(|m| Mask::from_gray8(&m[t]))
    }

    pub fn to_record(&self) -> Result<ClipRecord> {
        let frames = (0..self.len()).map(|t| self.frame(t)).collect::<Result<Vec<_>>>()?;
        let masks = self.masks.as_ref().map(|m| m.iter().map(Mask::from_gray8).collect());
        ClipRecord::new(frames, masks, self.centers.clone())
    }
}

/// An in-memory frame-sequence dataset with a flat index of consecutive pairs.
#[derive(Clone, Debug)]
pub struct FrameDataset {
    pub height: usize,
    pub width: usize,
    pub clips: Vec<StoredClip>,
    pairs: Vec<(usize, usize)>,
}

impl FrameDataset {
    pub fn load(root: &Path) -> Result<Self> {
        let manifest = read_manifest(root)?;
        let mut clips = Vec::new();
        for dir in clip_dirs(root)? {
            let paths = frame_paths(&dir)?;
            if paths.len() < 2 {
                log::warn!("skipping {}: {} frame(s), need at least 2", dir.display(), paths.len());
                continue;
            }
            let frames = paths.iter().map(|p| open_rgb(p)).collect::<Result<Vec<_>>>()?;
            let mask_dir = dir.join(MASK_DIR);
            let masks = if mask_dir.is_dir() {
                let mp = frame_paths(&mask_dir)?;
                if mp.len() == frames.len() {
                    Some(mp.iter().map(|p| open_gray(p)).collect::<Result<Vec<_>>>()?)
                } else {
                    log::warn!("{}: mask count differs from frame count, ignoring masks", dir.display());
                    None
                }
            } else {
                None
            };
            let id = dir.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let centers = manifest
                .get(&id)
                .filter(|r| r.centers.len() == frames.len())
                .map(|r| r.centers.iter().map(|c| (c[0], c[1])).collect());
            clips.push(StoredClip { id, frames, masks, centers });
        }
        FrameDataset::from_clips(clips)
    }

    pub fn from_clips(clips: Vec<StoredClip>) -> Result<Self> {
        let first = clips
            .first()
            .and_then(|c| c.frames.first())
            .ok_or_else(|| Error::InvalidInput("dataset holds no clip with two or more frames".into()))?;
        let (w, h) = first.dimensions();
        let (height, width) = (h as usize, w as usize);
        check_dims(height, width)?;
        for c in &clips {
            if c.frames.iter().any(|f| f.dimensions() != (w, h)) {
                return Err(Error::Shape(format!("clip {} does not match {height}x{width}", c.id)));
            }
        }
        let pairs = clips
            .iter()
            .enumerate()
            .flat_map(|(ci, c)| (0..c.len().saturating_sub(1)).map(move |t| (ci, t)))
            .collect();
        Ok(FrameDataset { height, width, clips, pairs })
    }

    pub fn pair_count(&self) -> usize {
        self.pairs.len()
    }

    /// `(clip index, t)` of the pair `i`.
    pub fn pair(&self, i: usize) -> (usize, usize) {
        self.pairs[i]
    }

    /// Splits off the last `holdout` clips as an evaluation set.
    pub fn split(self, holdout: usize) -> Result<(FrameDataset, FrameDataset)> {
        if holdout == 0 || holdout >= self.clips.len() {
            return Err(Error::Config(format!(
                "holdout of {holdout} clips needs 1..{} clips",
                self.clips.len()
            )));
        }
        let mut train = self.clips;
        let held = train.split_off(train.len() - holdout);
        Ok((FrameDataset::from_clips(train)?, FrameDataset::from_clips(held)?))
    }

    /// Stacks the pairs at `indices` into `([N,3,H,W], [N,3,H,W])` float tensors.
    pub fn batch(&self, indices: &[usize], kind: Kind) -> Result<(Tensor, Tensor)> {
        let mut a = Vec::with_capacity(indices.len());
        let mut b = Vec::with_capacity(indices.len());
        for &i in indices {
            let (c, t) = self.pairs[i];
            a.push(rgb_to_tensor(&self.clips[c].frames[t]));
            b.push(rgb_to_tensor(&self.clips[c].frames[t + 1]));
        }
        if a.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        Ok((Tensor::cat(&a, 0).to_kind(kind), Tensor::cat(&b, 0).to_kind(kind)))
    }
}

fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = img.dimensions();
    Tensor::from_slice(img.as_raw().as_slice())
        .view([1, h as i64, w as i64, 3])
        .permute([0, 3, 1, 2])
        .to_kind(Kind::Float)
        / 127.5
        - 1.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_clip(root: &Path, name: &str, n: usize, shade: u8) {
        let dir = root.join(name);
        fs::create_dir_all(&dir).unwrap();
        for t in 0..n {
            let img = RgbImage::from_pixel(16, 16, image::Rgb([shade, t as u8 * 10, 0]));
            img.save(dir.join(format!("{t:06}.png"))).unwrap();
        }
    }

    #[test]
    fn pairs_stay_within_clips() {
        let tmp = tempfile::tempdir().unwrap();
        write_clip(tmp.path(), "clip_000000", 3, 0);
        write_clip(tmp.path(), "clip_000001", 3, 255);
        let pairs: Vec<_> = load_frame_pairs(tmp.path()).unwrap().collect::<Result<_>>().unwrap();
        assert_eq!(pairs.len(), 4);
        for (a, b) in &pairs {
            assert_eq!(a.get(0, 0, 0), b.get(0, 0, 0), "pair crosses a clip boundary");
        }
        assert_eq!(pairs[0].0.get(0, 0, 0), -1.0);
        assert_eq!(pairs[2].0.get(0, 0, 0), 1.0);
    }

    #[test]
    fn short_clips_skipped_and_five_frames_give_four_pairs() {
        let tmp = tempfile::tempdir().unwrap();
        write_clip(tmp.path(), "a", 1, 0);
        write_clip(tmp.path(), "b", 5, 0);
        assert_eq!(load_frame_pairs(tmp.path()).unwrap().count(), 4);
        let ds = FrameDataset::load(tmp.path()).unwrap();
        assert_eq!(ds.pair_count(), 4);
    }

    #[test]
    fn unreadable_image_names_the_file() {
        let tmp = tempfile::tempdir().unwrap();
        write_clip(tmp.path(), "a", 3, 0);
        fs::write(tmp.path().join("a/000001.png"), b"not a png").unwrap();
        let err = load_frame_pairs(tmp.path())
            .unwrap()
            .find_map(|r| r.err())
            .expect("decode error");
        assert!(err.to_string().contains("000001.png"), "{err}");
    }

    #[test]
    fn batch_matches_frame_tensor() {
        let tmp = tempfile::tempdir().unwrap();
        write_clip(tmp.path(), "a", 3, 77);
        let ds = FrameDataset::load(tmp.path()).unwrap();
        let (a, b) = ds.batch(&[1], Kind::Float).unwrap();
        let fa = ds.clips[0].frame(1).unwrap().to_tensor(Kind::Float);
        let fb = ds.clips[0].frame(2).unwrap().to_tensor(Kind::Float);
        assert_eq!(f64::try_from((a - fa).abs().max()).unwrap(), 0.0);
        assert_eq!(f64::try_from((b - fb).abs().max()).unwrap(), 0.0);
    }
}
