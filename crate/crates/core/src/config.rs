//! Flat `key = value` configuration files.
//!
//! Lines are `namespace.key = value`; `#` starts a comment. Later lines and
//! explicit overrides replace earlier values.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::control::{ControlMode, FitConfig};
use crate::error::{Error, Result};
use crate::losses::{AdaptiveGan, ForegroundPrior, LossWeights, RatioSchedule};
use crate::nn::Profile;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvConfig {
    values: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = KvConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{raw}`", n + 1)))?;
            let k = k.trim();
            if k.is_empty() || k.contains(char::is_whitespace) {
                return Err(Error::Config(format!("line {}: invalid key `{k}`", n + 1)));
            }
            cfg.values.insert(k.to_string(), v.trim().to_string());
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        KvConfig::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.values.insert(key.to_string(), value.to_string());
    }

    /// Applies `key=value` override strings.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let parsed = KvConfig::parse(o.as_ref())?;
            self.values.extend(parsed.values);
        }
        Ok(())
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e| Error::Config(format!("{key} = `{v}`: {e}"))),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Everything the training loops need.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: u8,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub disc_lr: f64,
    pub seed: u64,
    pub profile: Profile,
    pub checkpoint_every: usize,
    pub holdout_clips: usize,
    pub loss: LossWeights,
    pub fit: FitConfig,
    pub fit_mode: ControlMode,
    /// Pairs whose fitted residual exceeds this are skipped in stage two.
    pub fit_max_residual: f64,
    /// Train the stage-two objective from a fresh model.
    pub single_stage: bool,
    /// Optional VGG-16 weights for the perceptual loss.
    pub vgg_weights: Option<PathBuf>,
    pub percept_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: 1,
            iterations: 3000,
            batch_size: 8,
            lr: 1e-4,
            disc_lr: 1e-4,
            seed: 0,
            profile: Profile::Toy,
            checkpoint_every: 1000,
            holdout_clips: 50,
            loss: LossWeights::default(),
            fit: FitConfig { iterations: 200, lr: 0.1, coarse_to_fine: false },
            fit_mode: ControlMode::Affine,
            fit_max_residual: 0.05,
            single_stage: false,
            vgg_weights: None,
            percept_seed: 1234,
        }
    }
}

/// Keys understood by [`TrainConfig::from_kv`].
pub const TRAIN_KEYS: &[&str] = &[
    "train.stage",
    "train.iterations",
    "train.batch_size",
    "train.lr",
    "train.disc_lr",
    "train.seed",
    "train.checkpoint_every",
    "train.single_stage",
    "data.holdout_clips",
    "model.profile",
    "loss.vq",
    "loss.percept",
    "loss.fg",
    "loss.bin",
    "loss.bg_stage2",
    "loss.tau",
    "loss.gan_warmup",
    "loss.gan_factor",
    "loss.gan_delta",
    "loss.gan_clamp",
    "loss.ratio_init",
    "loss.ratio_period",
    "loss.ratio_floor",
    "loss.use_bg",
    "loss.use_fg",
    "loss.use_bin",
    "loss.prior",
    "loss.symmetric_fg",
    "loss.vgg_weights",
    "loss.percept_seed",
    "fit.iterations",
    "fit.lr",
    "fit.coarse_to_fine",
    "fit.mode",
    "fit.max_residual",
];

impl TrainConfig {
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        for k in kv.keys() {
            if (k.starts_with("train.") || k.starts_with("loss.") || k.starts_with("fit."))
                && !TRAIN_KEYS.contains(&k)
            {
                return Err(Error::Config(format!("unknown key `{k}`")));
            }
        }
        let d = TrainConfig::default();
        let dl = d.loss.clone();
        let prior = match kv.get_str("loss.prior") {
            None | Some("dynamic") => ForegroundPrior::Dynamic,
            Some(v) => ForegroundPrior::Fixed(
                v.parse()
                    .map_err(|_| Error::Config(format!("loss.prior = `{v}`: expected `dynamic` or a number")))?,
            ),
        };
        let loss = LossWeights {
            vq: kv.get("loss.vq", dl.vq)?,
            percept: kv.get("loss.percept", dl.percept)?,
            fg: kv.get("loss.fg", dl.fg)?,
            bin: kv.get("loss.bin", dl.bin)?,
            bg_stage2: kv.get("loss.bg_stage2", dl.bg_stage2)?,
            tau: kv.get("loss.tau", dl.tau)?,
            gan: AdaptiveGan {
                delta: kv.get("loss.gan_delta", dl.gan.delta)?,
                clamp_max: kv.get("loss.gan_clamp", dl.gan.clamp_max)?,
                warmup_iters: kv.get("loss.gan_warmup", dl.gan.warmup_iters)?,
                factor: kv.get("loss.gan_factor", dl.gan.factor)?,
            },
            ratio: RatioSchedule {
                init: kv.get("loss.ratio_init", dl.ratio.init)?,
                period: kv.get("loss.ratio_period", dl.ratio.period)?,
                floor: kv.get("loss.ratio_floor", dl.ratio.floor)?,
            },
            use_bg: kv.get("loss.use_bg", dl.use_bg)?,
            use_fg: kv.get("loss.use_fg", dl.use_fg)?,
            use_bin: kv.get("loss.use_bin", dl.use_bin)?,
            prior,
            symmetric_fg: kv.get("loss.symmetric_fg", dl.symmetric_fg)?,
        };
        let cfg = TrainConfig {
            stage: kv.get("train.stage", d.stage)?,
            iterations: kv.get("train.iterations", d.iterations)?,
            batch_size: kv.get("train.batch_size", d.batch_size)?,
            lr: kv.get("train.lr", d.lr)?,
            disc_lr: kv.get("train.disc_lr", d.disc_lr)?,
            seed: kv.get("train.seed", d.seed)?,
            profile: kv.get("model.profile", d.profile)?,
            checkpoint_every: kv.get("train.checkpoint_every", d.checkpoint_every)?,
            holdout_clips: kv.get("data.holdout_clips", d.holdout_clips)?,
            loss,
            fit: FitConfig {
                iterations: kv.get("fit.iterations", d.fit.iterations)?,
                lr: kv.get("fit.lr", d.fit.lr)?,
                coarse_to_fine: kv.get("fit.coarse_to_fine", d.fit.coarse_to_fine)?,
            },
            fit_mode: kv.get("fit.mode", d.fit_mode)?,
            fit_max_residual: kv.get("fit.max_residual", d.fit_max_residual)?,
            single_stage: kv.get("train.single_stage", d.single_stage)?,
            vgg_weights: kv.get_str("loss.vgg_weights").map(PathBuf::from),
            percept_seed: kv.get("loss.percept_seed", d.percept_seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        let l = &self.loss;
        kv.set("train.stage", self.stage);
        kv.set("train.iterations", self.iterations);
        kv.set("train.batch_size", self.batch_size);
        kv.set("train.lr", self.lr);
        kv.set("train.disc_lr", self.disc_lr);
        kv.set("train.seed", self.seed);
        kv.set("train.checkpoint_every", self.checkpoint_every);
        kv.set("train.single_stage", self.single_stage);
        kv.set("data.holdout_clips", self.holdout_clips);
        kv.set("model.profile", format!("{:?}", self.profile).to_lowercase());
        kv.set("loss.vq", l.vq);
        kv.set("loss.percept", l.percept);
        kv.set("loss.fg", l.fg);
        kv.set("loss.bin", l.bin);
        kv.set("loss.bg_stage2", l.bg_stage2);
        kv.set("loss.tau", l.tau);
        kv.set("loss.gan_warmup", l.gan.warmup_iters);
        kv.set("loss.gan_factor", l.gan.factor);
        kv.set("loss.gan_delta", l.gan.delta);
        kv.set("loss.gan_clamp", l.gan.clamp_max);
        kv.set("loss.ratio_init", l.ratio.init);
        kv.set("loss.ratio_period", l.ratio.period);
        kv.set("loss.ratio_floor", l.ratio.floor);
        kv.set("loss.use_bg", l.use_bg);
        kv.set("loss.use_fg", l.use_fg);
        kv.set("loss.use_bin", l.use_bin);
        kv.set(
            "loss.prior",
            match l.prior {
                ForegroundPrior::Dynamic => "dynamic".to_string(),
                ForegroundPrior::Fixed(p) => p.to_string(),
            },
        );
        kv.set("loss.symmetric_fg", l.symmetric_fg);
        if let Some(p) = &self.vgg_weights {
            kv.set("loss.vgg_weights", p.display());
        }
        kv.set("loss.percept_seed", self.percept_seed);
        kv.set("fit.iterations", self.fit.iterations);
        kv.set("fit.lr", self.fit.lr);
        kv.set("fit.coarse_to_fine", self.fit.coarse_to_fine);
        kv.set("fit.mode", format!("{:?}", self.fit_mode).to_lowercase());
        kv.set("fit.max_residual", self.fit_max_residual);
        kv
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage != 1 && self.stage != 2 {
            return Err(Error::Config(format!("train.stage = {} must be 1 or 2", self.stage)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.disc_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.fit_mode == ControlMode::Nonparam {
            return Err(Error::Config("fit.mode must be positional or affine".into()));
        }
        if !(self.fit.lr > 0.0) {
            return Err(Error::Config("fit.lr must be positive".into()));
        }
        self.loss.validate()
    }
}
