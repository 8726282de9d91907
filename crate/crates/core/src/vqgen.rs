//! Vector-quantized generator: a shared encoder applied to the foreground and
//! background layers, a codebook, a decoder of the fused latents, and a patch
//! discriminator.

use tch::nn::{self, Module};
use tch::{Kind, Tensor};

use crate::error::{Error, Result};
use crate::nn::{conv3, group_norm, ArchConfig, AttnBlock, Downsample, ResBlock, Upsample};

/// Rows of the distance matrix computed at once during quantization.
const QUANT_CHUNK: i64 = 4096;

#[derive(Debug)]
pub struct Codebook {
    pub entries: Tensor,
}

/// Result of quantizing a latent grid `[N, n_z, h, w]`.
#[derive(Debug)]
pub struct Quantized {
    /// Codebook entries with gradient flowing to the codebook (for the codebook loss).
    pub zq: Tensor,
    /// Same forward values as `zq`; the backward pass copies the upstream gradient to `z`.
    pub st: Tensor,
    /// `[N, h, w]` entry indices.
    pub indices: Tensor,
}

impl Codebook {
    pub fn new(p: nn::Path, size: i64, dim: i64) -> Self {
        let bound = 1.0 / size as f64;
        let entries = p.var("entries", &[size, dim], nn::Init::Uniform { lo: -bound, up: bound });
        Codebook { entries }
    }

    pub fn size(&self) -> i64 {
        self.entries.size()[0]
    }

    pub fn dim(&self) -> i64 {
        self.entries.size()[1]
    }

    /// Nearest entry per row of `flat` (`[M, n_z]`), lowest index on ties.
    pub fn nearest(&self, flat: &Tensor) -> Tensor {
        nearest_indices(flat, &self.entries)
    }

    pub fn quantize(&self, z: &Tensor) -> Result<Quantized> {
        let (n, c, h, w) = z.size4().map_err(|_| Error::Shape(format!("latent grid {:?} is not 4-d", z.size())))?;
        if c != self.dim() {
            return Err(Error::Shape(format!("latent dim {c} differs from codebook dim {}", self.dim())));
        }
        let flat = z.permute([0, 2, 3, 1]).reshape([-1, c]);
        let idx = self.nearest(&flat);
        let zq = self
            .entries
            .index_select(0, &idx)
            .view([n, h, w, c])
            .permute([0, 3, 1, 2]);
        // Exactly zero in the forward pass, identity in the backward pass.
        let st = zq.detach() + (z - z.detach());
        Ok(Quantized { zq, st, indices: idx.view([n, h, w]) })
    }

    /// Per-entry usage counts over an index grid.
    pub fn usage(&self, indices: &Tensor) -> Vec<i64> {
        let counts = indices.view([-1]).bincount::<Tensor>(None, self.size());
        Vec::<i64>::try_from(&counts.to_kind(Kind::Int64)).unwrap_or_default()
    }
}

/// Exhaustive squared-distance argmin without the expanded-norm shortcut, so
/// equal distances compare exactly and ties go to the lowest index.
pub fn nearest_indices(flat: &Tensor, entries: &Tensor) -> Tensor {
    tch::no_grad(|| {
        let rows = flat.size()[0];
        let e = entries.detach().unsqueeze(0);
        let mut parts = Vec::new();
        let mut start = 0;
        while start < rows {
            let len = QUANT_CHUNK.min(rows - start);
            let chunk = flat.detach().narrow(0, start, len).unsqueeze(1);
            let d = (chunk - &e).square().sum_dim_intlist(-1, false, None);
            parts.push(d.argmin(-1, false));
            start += len;
        }
        Tensor::cat(&parts, 0)
    })
}

#[derive(Debug)]
pub struct Encoder {
    conv_in: nn::Conv2D,
    levels: Vec<(ResBlock, Downsample)>,
    mid: (ResBlock, AttnBlock, ResBlock),
    norm_out: nn::GroupNorm,
    conv_out: nn::Conv2D,
}

impl Encoder {
    pub fn new(p: nn::Path, arch: &ArchConfig) -> Self {
        let ch = arch.enc_channels;
        let levels = (0..4)
            .map(|i| {
                let lp = &p / "level" / i;
                (ResBlock::new(&lp / "res", ch[i], ch[i + 1]), Downsample::new(&lp / "down", ch[i + 1]))
            })
            .collect();
        let top = ch[4];
        Encoder {
            conv_in: conv3(&p / "conv_in", 3, ch[0]),
            levels,
            mid: (
                ResBlock::new(&p / "mid_res0", top, top),
                AttnBlock::new(&p / "mid_attn", top),
                ResBlock::new(&p / "mid_res1", top, top),
            ),
            norm_out: group_norm(&p / "norm_out", top),
            conv_out: conv3(&p / "conv_out", top, arch.n_z),
        }
    }
}

impl Module for Encoder {
    fn forward(&self, x: &Tensor) -> Tensor {
        let mut h = x.apply(&self.conv_in);
        for (res, down) in &self.levels {
            h = h.apply(res).apply(down);
        }
        let h = h.apply(&self.mid.0).apply(&self.mid.1).apply(&self.mid.2);
        h.apply(&self.norm_out).silu().apply(&self.conv_out)
    }
}

#[derive(Debug)]
pub struct Decoder {
    conv_in: nn::Conv2D,
    mid: (ResBlock, AttnBlock, ResBlock),
    levels: Vec<(ResBlock, Upsample)>,
    norm_out: nn::GroupNorm,
    pub conv_out: nn::Conv2D,
}

impl Decoder {
    pub fn new(p: nn::Path, arch: &ArchConfig) -> Self {
        let ch = arch.enc_channels;
        let top = ch[4];
        let plan = [(ch[4], ch[4]), (ch[4], ch[3]), (ch[3], ch[2]), (ch[2], ch[1])];
        let levels = plan
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout))| {
                let lp = &p / "level" / i;
                (ResBlock::new(&lp / "res", cin, cout), Upsample::new(&lp / "up", cout))
            })
            .collect();
        Decoder {
            conv_in: conv3(&p / "conv_in", arch.n_z, top),
            mid: (
                ResBlock::new(&p / "mid_res0", top, top),
                AttnBlock::new(&p / "mid_attn", top),
                ResBlock::new(&p / "mid_res1", top, top),
            ),
            levels,
            norm_out: group_norm(&p / "norm_out", ch[1]),
            conv_out: conv3(&p / "conv_out", ch[1], 3),
        }
    }

    /// Weight of the final convolution, used for adaptive GAN weighting.
    pub fn last_layer(&self) -> &Tensor {
        &self.conv_out.ws
    }
}

impl Module for Decoder {
    fn forward(&self, z: &Tensor) -> Tensor {
        let mut h = z.apply(&self.conv_in).apply(&self.mid.0).apply(&self.mid.1).apply(&self.mid.2);
        for (res, up) in &self.levels {
            h = h.apply(res).apply(up);
        }
        h.apply(&self.norm_out).silu().apply(&self.conv_out)
    }
}

/// Encoder outputs and quantizations of both layers plus the decoded frame.
#[derive(Debug)]
pub struct Generated {
    pub z_fg: Tensor,
    pub z_bg: Tensor,
    pub q_fg: Quantized,
    pub q_bg: Quantized,
    pub frame: Tensor,
}

#[derive(Debug)]
pub struct Generator {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub codebook: Codebook,
}

fn check_pair(frame: &Tensor, mask: &Tensor) -> Result<()> {
    let (fs, ms) = (frame.size(), mask.size());
    if fs.len() != 4 || ms.len() != 4 || fs[1] != 3 || ms[1] != 1 || fs[0] != ms[0] || fs[2..] != ms[2..] {
        return Err(Error::Shape(format!("frame {fs:?} and mask {ms:?} do not pair up")));
    }
    Ok(())
}

impl Generator {
    pub fn new(p: nn::Path, arch: &ArchConfig) -> Self {
        Generator {
            encoder: Encoder::new(&p / "encoder", arch),
            decoder: Decoder::new(&p / "decoder", arch),
            codebook: Codebook::new(&p / "codebook", arch.codebook_size, arch.n_z),
        }
    }

    /// Encodes `f * m` and `f * (1 - m)` with the shared encoder.
    pub fn encode_layers(&self, frame: &Tensor, mask: &Tensor) -> Result<(Tensor, Tensor)> {
        check_pair(frame, mask)?;
        let fg = frame * mask;
        let bg = frame * (1.0 - mask);
        // One batched pass keeps both streams under the same kernels.
        let z = Tensor::cat(&[fg, bg], 0).apply(&self.encoder);
        let n = frame.size()[0];
        Ok((z.narrow(0, 0, n), z.narrow(0, n, n)))
    }

    /// Decoder applied to the sum of the two quantized grids.
    pub fn generate(&self, frame: &Tensor, mask: &Tensor) -> Result<Generated> {
        let (z_fg, z_bg) = self.encode_layers(frame, mask)?;
        let q_fg = self.codebook.quantize(&z_fg)?;
        let q_bg = self.codebook.quantize(&z_bg)?;
        let out = (&q_fg.st + &q_bg.st).apply(&self.decoder);
        Ok(Generated { z_fg, z_bg, q_fg, q_bg, frame: out })
    }

    pub fn generate_next(&self, frame: &Tensor, mask: &Tensor) -> Result<Tensor> {
        Ok(self.generate(frame, mask)?.frame)
    }
}

/// Patch discriminator: three stride-2 layers and a one-channel logit map.
#[derive(Debug)]
pub struct Discriminator {
    convs: Vec<nn::Conv2D>,
    norms: Vec<Option<nn::GroupNorm>>,
    head: nn::Conv2D,
}

impl Discriminator {
    pub fn new(p: nn::Path, arch: &ArchConfig) -> Self {
        let cfg = nn::ConvConfig { stride: 2, padding: 1, ..Default::default() };
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut cin = 3;
        for (i, &c) in arch.disc_channels.iter().enumerate() {
            convs.push(nn::conv2d(&p / "conv" / i, cin, c, 4, cfg));
            norms.push((i > 0).then(|| group_norm(&p / "norm" / i, c)));
            cin = c;
        }
        let head = conv3(&p / "head", cin, 1);
        Discriminator { convs, norms, head }
    }
}

impl Module for Discriminator {
    fn forward(&self, x: &Tensor) -> Tensor {
        let mut h = x.shallow_clone();
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            h = h.apply(conv);
            if let Some(n) = norm {
                h = h.apply(n);
            }
            h = leaky_relu(&h);
        }
        h.apply(&self.head)
    }
}

/// Leaky ReLU with slope 0.2.
fn leaky_relu(x: &Tensor) -> Tensor {
    x.maximum(&(x * 0.2))
}
