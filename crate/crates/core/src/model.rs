//! The full model: mask network, generator and discriminator, plus the single
//! inference step shared by rollouts and the session service.

use std::collections::BTreeMap;

use log::warn;
use sha2::{Digest, Sha256};
use tch::nn::{self, Module};
use tch::{Device, Kind, Tensor};

use crate::control::ControlParams;
use crate::data::{check_dims, Frame};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::masknet::MaskNet;
use crate::nn::ArchConfig;
use crate::vqgen::{Discriminator, Generator};

pub const MASKNET_PREFIX: &str = "masknet.";
pub const GENERATOR_PREFIX: &str = "generator.";
pub const DISC_PREFIX: &str = "disc.";

#[derive(Debug)]
pub struct Model {
    pub arch: ArchConfig,
    pub height: usize,
    pub width: usize,
    pub masknet_vs: nn::VarStore,
    pub generator_vs: nn::VarStore,
    pub disc_vs: nn::VarStore,
    pub masknet: MaskNet,
    pub generator: Generator,
    pub disc: Discriminator,
}

/// One generated step.
#[derive(Clone, Debug)]
pub struct Advance {
    pub frame: Frame,
    /// Hard mask the generator was conditioned on.
    pub control_mask: Mask,
    /// Soft mask predicted on the generated frame.
    pub mask: Mask,
}

fn sorted_vars(vs: &nn::VarStore) -> BTreeMap<String, Tensor> {
    vs.variables().into_iter().collect()
}

impl Model {
    /// Builds a freshly initialized model; the global torch generator is seeded
    /// with `seed` first so initialization is reproducible.
    pub fn new(arch: &ArchConfig, height: usize, width: usize, seed: u64) -> Result<Self> {
        arch.validate()?;
        check_dims(height, width)?;
        tch::manual_seed(seed as i64);
        let masknet_vs = nn::VarStore::new(Device::Cpu);
        let generator_vs = nn::VarStore::new(Device::Cpu);
        let disc_vs = nn::VarStore::new(Device::Cpu);
        let masknet = MaskNet::new(masknet_vs.root(), arch);
        let generator = Generator::new(generator_vs.root(), arch);
        let disc = Discriminator::new(disc_vs.root(), arch);
        Ok(Model { arch: arch.clone(), height, width, masknet_vs, generator_vs, disc_vs, masknet, generator, disc })
    }

    /// All parameters keyed by group prefix and variable name.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (prefix, vs) in [
            (MASKNET_PREFIX, &self.masknet_vs),
            (GENERATOR_PREFIX, &self.generator_vs),
            (DISC_PREFIX, &self.disc_vs),
        ] {
            for (k, v) in sorted_vars(vs) {
                out.push((format!("{prefix}{k}"), v));
            }
        }
        out
    }

    /// Copies parameters from `tensors`; every model variable must be present.
    pub fn load_tensors(&mut self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (prefix, vs) in [
            (MASKNET_PREFIX, &self.masknet_vs),
            (GENERATOR_PREFIX, &self.generator_vs),
            (DISC_PREFIX, &self.disc_vs),
        ] {
            for (k, mut v) in sorted_vars(vs) {
                let key = format!("{prefix}{k}");
                let src = tensors
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{key}`")))?;
                if src.size() != v.size() {
                    return Err(Error::Checkpoint(format!(
                        "tensor `{key}` has shape {:?}, model expects {:?}",
                        src.size(),
                        v.size()
                    )));
                }
                tch::no_grad(|| v.copy_(src));
            }
        }
        Ok(())
    }

    /// SHA-256 over the mask network's parameter names and values.
    pub fn masknet_hash(&self) -> String {
        hash_vars(&self.masknet_vs)
    }

    pub fn check_frame(&self, frame: &Frame) -> Result<()> {
        if frame.height() != self.height || frame.width() != self.width {
            return Err(Error::Shape(format!(
                "frame is {}x{}, model expects {}x{}",
                frame.height(),
                frame.width(),
                self.height,
                self.width
            )));
        }
        Ok(())
    }

    pub fn predict_mask(&self, frame: &Frame) -> Result<Mask> {
        self.check_frame(frame)?;
        self.masknet.predict_mask(frame, Kind::Float)
    }

    /// Applies `control` to `mask` (the soft mask of `frame`), generates the next
    /// frame and predicts its mask.
    pub fn advance(&self, frame: &Frame, mask: &Mask, control: &ControlParams) -> Result<Advance> {
        self.check_frame(frame)?;
        let control_mask = control.apply(mask)?;
        if control_mask.is_empty() {
            warn!("control mask has no foreground");
        }
        let next = tch::no_grad(|| -> Result<Tensor> {
            let f = frame.to_tensor(Kind::Float);
            let m = control_mask.to_tensor(Kind::Float);
            self.generator.generate_next(&f, &m)
        })?;
        let frame = Frame::from_tensor(&next)?;
        let mask = self.predict_mask(&frame)?;
        Ok(Advance { frame, control_mask, mask })
    }

    /// Discriminator logits for a batch.
    pub fn discriminate(&self, x: &Tensor) -> Tensor {
        self.disc.forward(x)
    }
}

pub fn hash_vars(vs: &nn::VarStore) -> String {
    let mut h = Sha256::new();
    for (k, v) in sorted_vars(vs) {
        h.update(k.as_bytes());
        let flat = v.detach().to_kind(Kind::Float).contiguous().view([-1]);
        let values = Vec::<f32>::try_from(&flat).unwrap_or_default();
        for x in values {
            h.update(x.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
