//! Training objectives and their weighting.
//!
//! Frames are `[N, C, H, W]`, masks `[N, 1, H, W]`. Every norm is reported as
//! a mean over elements.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::nn::{self, Module};
use tch::{Device, Kind, Tensor};

use crate::error::{Error, Result};

/// Reconstruction, codebook and commitment terms of the VQ objective.
#[derive(Debug)]
pub struct VqLoss {
    pub reconstruction: Tensor,
    pub codebook: Tensor,
    pub commitment: Tensor,
    pub total: Tensor,
}

/// `z_e` and `z_q` hold one entry per latent stream. `z_q` must carry the
/// gradient to the codebook, not the straight-through value.
pub fn loss_vq(f_next: &Tensor, f_hat: &Tensor, z_e: &[&Tensor], z_q: &[&Tensor]) -> Result<VqLoss> {
    if f_next.size() != f_hat.size() {
        return Err(Error::Shape(format!("frames {:?} vs {:?}", f_next.size(), f_hat.size())));
    }
    if z_e.is_empty() || z_e.len() != z_q.len() {
        return Err(Error::Shape("need matching, non-empty latent streams".into()));
    }
    for (e, q) in z_e.iter().zip(z_q) {
        if e.size() != q.size() {
            return Err(Error::Shape(format!("latent {:?} vs quantized {:?}", e.size(), q.size())));
        }
    }
    let reconstruction = (f_next - f_hat).abs().mean(f_hat.kind());
    let n = z_e.len() as f64;
    let mut codebook = Tensor::zeros([], (f_hat.kind(), f_hat.device()));
    let mut commitment = Tensor::zeros([], (f_hat.kind(), f_hat.device()));
    for (e, q) in z_e.iter().zip(z_q) {
        codebook = codebook + (e.detach() - *q).square().mean(q.kind()) / n;
        commitment = commitment + (q.detach() - *e).square().mean(e.kind()) / n;
    }
    let total = &reconstruction + &codebook + &commitment;
    Ok(VqLoss { reconstruction, codebook, commitment, total })
}

/// Non-saturating generator term `-mean log sigmoid(fake)`.
pub fn gan_generator_loss(fake_logits: &Tensor) -> Tensor {
    -fake_logits.log_sigmoid().mean(fake_logits.kind())
}

/// The discriminator objective `mean log C(real) + mean log (1 - C(fake))`,
/// which the discriminator maximizes.
pub fn gan_discriminator_objective(real_logits: &Tensor, fake_logits: &Tensor) -> Tensor {
    real_logits.log_sigmoid().mean(real_logits.kind()) + (-fake_logits).log_sigmoid().mean(fake_logits.kind())
}

/// Loss minimized by the discriminator step.
pub fn gan_discriminator_loss(real_logits: &Tensor, fake_logits: &Tensor) -> Tensor {
    -gan_discriminator_objective(real_logits, fake_logits)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveGan {
    pub delta: f64,
    pub clamp_max: f64,
    pub warmup_iters: usize,
    /// Extra multiplier applied to the adaptive ratio.
    pub factor: f64,
}

impl Default for AdaptiveGan {
    fn default() -> Self {
        AdaptiveGan { delta: 1e-6, clamp_max: 1e4, warmup_iters: 500, factor: 0.8 }
    }
}

impl AdaptiveGan {
    pub fn weight(&self, iter: usize, recon_grad_norm: f64, gan_grad_norm: f64) -> f64 {
        if iter < self.warmup_iters {
            return 0.0;
        }
        self.factor * adaptive_gan_weight(recon_grad_norm, gan_grad_norm, self.delta, self.clamp_max)
    }
}

pub fn adaptive_gan_weight(recon_grad_norm: f64, gan_grad_norm: f64, delta: f64, clamp_max: f64) -> f64 {
    let w = recon_grad_norm / (gan_grad_norm + delta);
    if w.is_finite() {
        w.clamp(0.0, clamp_max)
    } else {
        clamp_max
    }
}

/// Norm of `d loss / d wrt`, keeping the graph for the caller's backward pass.
pub fn grad_norm(loss: &Tensor, wrt: &Tensor) -> f64 {
    let g = Tensor::run_backward(&[loss], &[wrt], true, false);
    g[0].norm().double_value(&[])
}

enum Op {
    Conv(nn::Conv2D),
    Relu,
    Silu,
    MaxPool,
}

/// Frozen convolutional feature function with taps at the end of each stage.
pub struct FeatureExtractor {
    _vs: nn::VarStore,
    stages: Vec<Vec<Op>>,
    input_norm: Option<(Tensor, Tensor)>,
}

impl std::fmt::Debug for FeatureExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeatureExtractor").field("taps", &self.stages.len()).finish()
    }
}

fn seeded_conv(p: nn::Path, rng: &mut ChaCha8Rng, cin: i64, cout: i64, stride: i64) -> nn::Conv2D {
    let cfg = nn::ConvConfig { stride, padding: 1, ..Default::default() };
    let mut conv = nn::conv2d(p, cin, cout, 3, cfg);
    let fan_in = (cin * 9) as f64;
    let bound = (6.0 / fan_in).sqrt();
    let w: Vec<f32> = (0..cout * cin * 9).map(|_| rng.gen_range(-bound..bound) as f32).collect();
    tch::no_grad(|| {
        conv.ws.copy_(&Tensor::from_slice(&w).view([cout, cin, 3, 3]));
        if let Some(b) = conv.bs.as_mut() {
            let _ = b.zero_();
        }
    });
    conv
}

impl FeatureExtractor {
    /// Randomly initialized pyramid: one stride-1 and two stride-2 3x3 conv
    /// stages with SiLU, seeded independently of the global generator.
    pub fn random(channels: [i64; 3], seed: u64, kind: Kind) -> Self {
        let mut vs = nn::VarStore::new(Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let root = vs.root();
        let mut stages = Vec::new();
        let mut cin = 3;
        for (i, &c) in channels.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            stages.push(vec![Op::Conv(seeded_conv(&root / "stage" / i, &mut rng, cin, c, stride)), Op::Silu]);
            cin = c;
        }
        if kind == Kind::Double {
            vs.double();
        }
        vs.freeze();
        FeatureExtractor { _vs: vs, stages, input_norm: None }
    }

    /// VGG-16 convolutional trunk tapped after relu1_2, relu2_2, relu3_3 and
    /// relu4_3. Variable names follow the torchvision `features.<index>` layout.
    pub fn vgg16(weights: &Path, kind: Kind) -> Result<Self> {
        let mut vs = nn::VarStore::new(Device::Cpu);
        let root = vs.root();
        let plan: [&[i64]; 4] = [&[64, 64], &[128, 128], &[256, 256, 256], &[512, 512, 512]];
        let mut stages = Vec::new();
        let mut index = 0usize;
        let mut cin = 3;
        for (s, widths) in plan.iter().enumerate() {
            let mut ops = Vec::new();
            if s > 0 {
                ops.push(Op::MaxPool);
                index += 1;
            }
            for &c in widths.iter() {
                let cfg = nn::ConvConfig { padding: 1, ..Default::default() };
                ops.push(Op::Conv(nn::conv2d(&root / "features" / index, cin, c, 3, cfg)));
                ops.push(Op::Relu);
                index += 2;
                cin = c;
            }
            stages.push(ops);
        }
        vs.load(weights).map_err(|e| Error::Config(format!("loading {}: {e}", weights.display())))?;
        if kind == Kind::Double {
            vs.double();
        }
        vs.freeze();
        let mean = Tensor::from_slice(&[0.485f32, 0.456, 0.406]).view([1, 3, 1, 1]).to_kind(kind);
        let std = Tensor::from_slice(&[0.229f32, 0.224, 0.225]).view([1, 3, 1, 1]).to_kind(kind);
        Ok(FeatureExtractor { _vs: vs, stages, input_norm: Some((mean, std)) })
    }

    /// Single tap returning the input unchanged (a linear extractor).
    pub fn identity() -> Self {
        FeatureExtractor { _vs: nn::VarStore::new(Device::Cpu), stages: vec![Vec::new()], input_norm: None }
    }

    pub fn features(&self, x: &Tensor) -> Vec<Tensor> {
        let mut h = match &self.input_norm {
            // [-1, 1] to [0, 1], then per-channel standardization.
            Some((mean, std)) => ((x + 1.0) * 0.5 - mean) / std,
            None => x.shallow_clone(),
        };
        let mut taps = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            for op in stage {
                h = match op {
                    Op::Conv(c) => c.forward(&h),
                    Op::Relu => h.relu(),
                    Op::Silu => h.silu(),
                    Op::MaxPool => h.max_pool2d([2, 2], [2, 2], [0, 0], [1, 1], false),
                };
            }
            taps.push(h.shallow_clone());
        }
        taps
    }
}

/// Per-sample, per-tap root-mean-square feature distance, averaged over taps and batch.
pub fn loss_percept(f_hat: &Tensor, f_next: &Tensor, v: &FeatureExtractor) -> Result<Tensor> {
    if f_hat.size() != f_next.size() {
        return Err(Error::Shape(format!("frames {:?} vs {:?}", f_hat.size(), f_next.size())));
    }
    let a = v.features(f_hat);
    let b = v.features(f_next);
    let taps = a.len() as f64;
    let mut total = Tensor::zeros([], (f_hat.kind(), f_hat.device()));
    for (fa, fb) in a.iter().zip(&b) {
        let per_sample = (fa - fb).square().mean_dim(&[1i64, 2, 3][..], false, fa.kind());
        total = total + (per_sample + 1e-12).sqrt().mean(fa.kind()) / taps;
    }
    Ok(total)
}

fn check_frame_mask(a: &Tensor, b: &Tensor, m: &Tensor) -> Result<()> {
    let (sa, sm) = (a.size(), m.size());
    if sa != b.size() || sa.len() != 4 || sm.len() != 4 || sm[1] != 1 || sa[0] != sm[0] || sa[2..] != sm[2..] {
        return Err(Error::Shape(format!("frames {:?}/{:?} and mask {:?} do not pair up", sa, b.size(), sm)));
    }
    Ok(())
}

/// Mean absolute change outside the mask.
pub fn loss_bg(f_t: &Tensor, f_next: &Tensor, m: &Tensor) -> Result<Tensor> {
    check_frame_mask(f_t, f_next, m)?;
    Ok(((1.0f64 - m) * (f_t - f_next)).abs().mean(f_t.kind()))
}

/// Stage-two background term: the generated frame must match the real next
/// frame outside the (hard) conditioning mask.
pub fn loss_bg_stage2(f_tilde: &Tensor, f_next: &Tensor, m: &Tensor) -> Result<Tensor> {
    loss_bg(f_tilde, f_next, m)
}

/// Binary change map: 1 where the channel-mean absolute difference exceeds `tau`.
pub fn change_map(f_t: &Tensor, f_next: &Tensor, tau: f64) -> Result<Tensor> {
    if tau <= 0.0 {
        return Err(Error::Config(format!("change threshold {tau} must be positive")));
    }
    if f_t.size() != f_next.size() || f_t.dim() != 4 {
        return Err(Error::Shape(format!("frames {:?} vs {:?}", f_t.size(), f_next.size())));
    }
    let d = (f_t - f_next).abs().mean_dim(1i64, true, f_t.kind());
    Ok(d.gt(tau).to_kind(f_t.kind()))
}

/// Target foreground fraction for the foreground budget.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ForegroundPrior {
    /// Per-pair change map fraction.
    Dynamic,
    Fixed(f64),
}

/// Per-sample hinge `max(0, mean(m) - mean(mu))`, or `|mean(m) - mean(mu)|`
/// when `symmetric`, averaged over the batch.
pub fn loss_fg(m: &Tensor, mu: &Tensor, symmetric: bool) -> Result<Tensor> {
    if m.size() != mu.size() || m.dim() != 4 {
        return Err(Error::Shape(format!("mask {:?} vs change map {:?}", m.size(), mu.size())));
    }
    let dims = &[1i64, 2, 3][..];
    let target = mu.mean_dim(dims, false, mu.kind());
    fg_against(m, &target, symmetric)
}

pub fn loss_fg_fixed(m: &Tensor, prior: f64, symmetric: bool) -> Result<Tensor> {
    if m.dim() != 4 {
        return Err(Error::Shape(format!("mask {:?} is not 4-d", m.size())));
    }
    let target = Tensor::full([m.size()[0]], prior, (m.kind(), m.device()));
    fg_against(m, &target, symmetric)
}

fn fg_against(m: &Tensor, target: &Tensor, symmetric: bool) -> Result<Tensor> {
    let diff = m.mean_dim(&[1i64, 2, 3][..], false, m.kind()) - target;
    let per = if symmetric { diff.abs() } else { diff.clamp_min(0.0) };
    Ok(per.mean(m.kind()))
}

/// Mean distance of the mask from the nearest binary value.
pub fn loss_bin(m: &Tensor) -> Tensor {
    m.minimum(&(1.0 - m)).mean(m.kind())
}

/// Stage-one background:foreground weight ratio, halved every `period`
/// iterations down to `floor`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioSchedule {
    pub init: f64,
    pub period: usize,
    pub floor: f64,
}

impl Default for RatioSchedule {
    fn default() -> Self {
        RatioSchedule { init: 80.0, period: 1000, floor: 5.0 }
    }
}

impl RatioSchedule {
    pub fn ratio(&self, iter: usize) -> f64 {
        let halvings = (iter / self.period.max(1)).min(1000) as i32;
        (self.init / 2f64.powi(halvings)).max(self.floor)
    }

    /// `(lambda_bg, lambda_fg)` at `iter`.
    pub fn weights(&self, iter: usize, lambda_fg: f64) -> (f64, f64) {
        (self.ratio(iter) * lambda_fg, lambda_fg)
    }
}

/// Loss weights and the switches used by the ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub vq: f64,
    pub percept: f64,
    pub fg: f64,
    pub bin: f64,
    pub bg_stage2: f64,
    pub tau: f64,
    pub gan: AdaptiveGan,
    pub ratio: RatioSchedule,
    pub use_bg: bool,
    pub use_fg: bool,
    pub use_bin: bool,
    pub prior: ForegroundPrior,
    pub symmetric_fg: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            vq: 1.0,
            percept: 1.0,
            fg: 1.0,
            bin: 1.0,
            bg_stage2: 5.0,
            tau: 0.1,
            gan: AdaptiveGan::default(),
            ratio: RatioSchedule::default(),
            use_bg: true,
            use_fg: true,
            use_bin: true,
            prior: ForegroundPrior::Dynamic,
            symmetric_fg: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("vq", self.vq),
            ("percept", self.percept),
            ("fg", self.fg),
            ("bin", self.bin),
            ("bg_stage2", self.bg_stage2),
            ("gan.factor", self.gan.factor),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} = {v} must be a non-negative number")));
            }
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau = {} must be positive", self.tau)));
        }
        if self.ratio.floor <= 0.0 || self.ratio.init < self.ratio.floor || self.ratio.period == 0 {
            return Err(Error::Config("ratio schedule needs init >= floor > 0 and period > 0".into()));
        }
        if let ForegroundPrior::Fixed(p) = self.prior {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("fixed prior {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}
