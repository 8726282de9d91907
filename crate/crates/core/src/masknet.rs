//! The mask network: a residual encoder-decoder predicting a soft foreground
//! mask from a single frame.

use tch::nn::{self, Module};
use tch::{Kind, Tensor};

pub use crate::mask::Mask;
use crate::data::Frame;
use crate::error::{Error, Result};
use crate::nn::{conv3, group_norm, ArchConfig, Downsample, ResBlock, Upsample};

#[derive(Debug)]
pub struct MaskNet {
    conv_in: nn::Conv2D,
    down: Vec<(ResBlock, Downsample)>,
    body: Vec<ResBlock>,
    up: Vec<(Upsample, ResBlock)>,
    norm_out: nn::GroupNorm,
    conv_out: nn::Conv2D,
}

impl MaskNet {
    pub fn new(p: nn::Path, arch: &ArchConfig) -> Self {
        let (outer, mid) = (arch.mask_outer, arch.mask_mid);
        let conv_in = conv3(&p / "conv_in", 3, outer);
        let down = vec![
            (ResBlock::new(&p / "down0" / "res", outer, outer), Downsample::new(&p / "down0" / "down", outer)),
            (ResBlock::new(&p / "down1" / "res", outer, mid), Downsample::new(&p / "down1" / "down", mid)),
        ];
        let body = (0..arch.mask_res_blocks)
            .map(|i| ResBlock::new(&p / "body" / i, mid, mid))
            .collect();
        let up = vec![
            (Upsample::new(&p / "up0" / "up", mid), ResBlock::new(&p / "up0" / "res", mid, outer)),
            (Upsample::new(&p / "up1" / "up", outer), ResBlock::new(&p / "up1" / "res", outer, outer)),
        ];
        let norm_out = group_norm(&p / "norm_out", outer);
        let conv_out = conv3(&p / "conv_out", outer, 1);
        MaskNet { conv_in, down, body, up, norm_out, conv_out }
    }

    /// Pre-sigmoid logits `[N, 1, H, W]` for frames `[N, 3, H, W]`.
    pub fn logits(&self, x: &Tensor) -> Tensor {
        let mut h = x.apply(&self.conv_in);
        for (res, down) in &self.down {
            h = h.apply(res).apply(down);
        }
        for res in &self.body {
            h = h.apply(res);
        }
        for (up, res) in &self.up {
            h = h.apply(up).apply(res);
        }
        h.apply(&self.norm_out).silu().apply(&self.conv_out)
    }

    /// Soft masks in `(0, 1)`.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.logits(x).sigmoid()
    }

    pub fn predict_mask(&self, frame: &Frame, kind: Kind) -> Result<Mask> {
        let m = tch::no_grad(|| self.forward(&frame.to_tensor(kind)));
        Mask::from_tensor(&m).map_err(|e| match e {
            Error::InvalidInput(msg) => Error::InvalidInput(format!("mask network output: {msg}")),
            other => other,
        })
    }
}

impl Module for MaskNet {
    fn forward(&self, xs: &Tensor) -> Tensor {
        MaskNet::forward(self, xs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tch::{Device, Kind};

    #[test]
    fn output_shape_and_range() {
        tch::manual_seed(0);
        let vs = nn::VarStore::new(Device::Cpu);
        let net = MaskNet::new(vs.root(), &ArchConfig::toy());
        let x = Tensor::rand([2, 3, 32, 48], (Kind::Float, Device::Cpu)) * 2.0 - 1.0;
        let m = net.forward(&x);
        assert_eq!(m.size(), vec![2, 1, 32, 48]);
        let lo = f64::try_from(m.min()).unwrap();
        let hi = f64::try_from(m.max()).unwrap();
        assert!(lo > 0.0 && hi < 1.0);
        assert!(net.forward(&x).equal(&m));
    }
}
