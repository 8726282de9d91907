//! Convolutional building blocks shared by the mask network and the generator.

use serde::{Deserialize, Serialize};
use tch::nn::{self, Module};
use tch::Tensor;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Toy,
    Full,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "toy" => Ok(Profile::Toy),
            "full" => Ok(Profile::Full),
            other => Err(Error::Config(format!("unknown profile `{other}` (toy|full)"))),
        }
    }
}

/// Channel plan of every network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Mask network width at full and quarter resolution.
    pub mask_outer: i64,
    pub mask_mid: i64,
    pub mask_res_blocks: usize,
    /// Encoder widths: input conv, then after each of the four downsampling levels.
    pub enc_channels: [i64; 5],
    pub n_z: i64,
    pub codebook_size: i64,
    pub disc_channels: [i64; 3],
    /// Widths of the frozen random perceptual pyramid.
    pub percept_channels: [i64; 3],
}

impl ArchConfig {
    pub fn toy() -> Self {
        ArchConfig {
            mask_outer: 16,
            mask_mid: 64,
            mask_res_blocks: 9,
            enc_channels: [16, 16, 32, 48, 64],
            n_z: 32,
            codebook_size: 128,
            disc_channels: [16, 32, 64],
            percept_channels: [16, 32, 64],
        }
    }

    pub fn full() -> Self {
        ArchConfig {
            mask_outer: 64,
            mask_mid: 256,
            mask_res_blocks: 9,
            enc_channels: [256, 256, 128, 128, 64],
            n_z: 256,
            codebook_size: 1024,
            disc_channels: [64, 128, 256],
            percept_channels: [64, 128, 256],
        }
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Toy => ArchConfig::toy(),
            Profile::Full => ArchConfig::full(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [self.mask_outer, self.mask_mid, self.n_z]
            .into_iter()
            .chain(self.enc_channels)
            .chain(self.disc_channels)
            .chain(self.percept_channels);
        for w in widths {
            if w <= 0 {
                return Err(Error::Config(format!("channel width {w} must be positive")));
            }
        }
        if self.codebook_size < 2 {
            return Err(Error::Config("codebook needs at least 2 entries".into()));
        }
        Ok(())
    }
}

/// Group count for a normalization over `ch` channels: the largest of
/// 32, 16, ..., 1 dividing `ch` with at least two channels per group.
pub fn norm_groups(ch: i64) -> i64 {
    [32, 16, 8, 4, 2]
        .into_iter()
        .find(|&g| ch % g == 0 && ch / g >= 2)
        .unwrap_or(1)
}

pub fn group_norm(p: nn::Path, ch: i64) -> nn::GroupNorm {
    nn::group_norm(p, norm_groups(ch), ch, Default::default())
}

pub fn conv3(p: nn::Path, cin: i64, cout: i64) -> nn::Conv2D {
    nn::conv2d(p, cin, cout, 3, nn::ConvConfig { padding: 1, ..Default::default() })
}

pub fn conv1(p: nn::Path, cin: i64, cout: i64) -> nn::Conv2D {
    nn::conv2d(p, cin, cout, 1, Default::default())
}

/// GroupNorm, SiLU, conv, twice, plus a (projected) identity skip.
#[derive(Debug)]
pub struct ResBlock {
    norm1: nn::GroupNorm,
    conv1: nn::Conv2D,
    norm2: nn::GroupNorm,
    conv2: nn::Conv2D,
    skip: Option<nn::Conv2D>,
}

impl ResBlock {
    pub fn new(p: nn::Path, cin: i64, cout: i64) -> Self {
        ResBlock {
            norm1: group_norm(&p / "norm1", cin),
            conv1: conv3(&p / "conv1", cin, cout),
            norm2: group_norm(&p / "norm2", cout),
            conv2: conv3(&p / "conv2", cout, cout),
            skip: (cin != cout).then(|| conv1(&p / "skip", cin, cout)),
        }
    }
}

impl Module for ResBlock {
    fn forward(&self, x: &Tensor) -> Tensor {
        let h = x.apply(&self.norm1).silu().apply(&self.conv1);
        let h = h.apply(&self.norm2).silu().apply(&self.conv2);
        match &self.skip {
            Some(s) => x.apply(s) + h,
            None => x + h,
        }
    }
}

/// Stride-2 4x4 convolution, padded symmetrically on even-sized inputs.
#[derive(Debug)]
pub struct Downsample {
    conv: nn::Conv2D,
}

impl Downsample {
    pub fn new(p: nn::Path, ch: i64) -> Self {
        let cfg = nn::ConvConfig { stride: 2, padding: 1, ..Default::default() };
        Downsample { conv: nn::conv2d(p / "conv", ch, ch, 4, cfg) }
    }
}

impl Module for Downsample {
    fn forward(&self, x: &Tensor) -> Tensor {
        x.apply(&self.conv)
    }
}

/// Nearest-neighbour 2x upsampling followed by a 3x3 convolution.
#[derive(Debug)]
pub struct Upsample {
    conv: nn::Conv2D,
}

impl Upsample {
    pub fn new(p: nn::Path, ch: i64) -> Self {
        Upsample { conv: conv3(p / "conv", ch, ch) }
    }
}

impl Module for Upsample {
    fn forward(&self, x: &Tensor) -> Tensor {
        let s = x.size();
        x.upsample_nearest2d([s[2] * 2, s[3] * 2], Some(2.0), Some(2.0)).apply(&self.conv)
    }
}

/// Single-head self-attention over the spatial grid with a residual connection.
#[derive(Debug)]
pub struct AttnBlock {
    norm: nn::GroupNorm,
    q: nn::Conv2D,
    k: nn::Conv2D,
    v: nn::Conv2D,
    proj: nn::Conv2D,
}

impl AttnBlock {
    pub fn new(p: nn::Path, ch: i64) -> Self {
        AttnBlock {
            norm: group_norm(&p / "norm", ch),
            q: conv1(&p / "q", ch, ch),
            k: conv1(&p / "k", ch, ch),
            v: conv1(&p / "v", ch, ch),
            proj: conv1(&p / "proj", ch, ch),
        }
    }
}

impl Module for AttnBlock {
    fn forward(&self, x: &Tensor) -> Tensor {
        let (n, c, h, w) = x.size4().expect("4-d input");
        let hn = x.apply(&self.norm);
        let q = hn.apply(&self.q).view([n, c, h * w]).permute([0, 2, 1]);
        let k = hn.apply(&self.k).view([n, c, h * w]);
        let v = hn.apply(&self.v).view([n, c, h * w]);
        let attn = (q.bmm(&k) / (c as f64).sqrt()).softmax(-1, q.kind());
        let out = v.bmm(&attn.permute([0, 2, 1])).view([n, c, h, w]);
        x + out.apply(&self.proj)
    }
}
