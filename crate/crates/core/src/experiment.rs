//! The desk-scale experiment: synthetic data, two-stage training, evaluation
//! and the ablation arms. Every artefact is cached under a work directory and
//! keyed by a hash of the configuration that produced it.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{load_model, Checkpoint};
use crate::config::TrainConfig;
use crate::data::{generate_sprite_dataset, FrameDataset, SpriteConfig, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::evaluate::{evaluate, EvalConfig, EvalOutcome};
use crate::trainer::{FitCache, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Full,
    NoBg,
    NoFg,
    SingleStage,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Full, Arm::NoBg, Arm::NoFg, Arm::SingleStage];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Full => "full",
            Arm::NoBg => "no_bg",
            Arm::NoFg => "no_fg",
            Arm::SingleStage => "single_stage",
        }
    }
}

impl std::str::FromStr for Arm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown arm `{s}` (full, no_bg, no_fg, single_stage)")))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: SpriteConfig,
    pub holdout_clips: usize,
    pub base: TrainConfig,
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut base = TrainConfig { lr: 4e-4, disc_lr: 4e-4, ..TrainConfig::default() };
        // an uninformative discriminator early on otherwise gets a huge adaptive weight
        base.loss.gan.factor = 0.1;
        base.loss.gan.clamp_max = 1.0;
        ExperimentConfig {
            data: SpriteConfig::default(),
            holdout_clips: 50,
            base,
            stage1_iters: 3000,
            stage2_iters: 2000,
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: Arm,
    pub config_hash: String,
    pub checkpoint: PathBuf,
    pub seconds: f64,
    pub outcome: EvalOutcome,
}

fn hash_json<T: Serialize>(v: &T) -> Result<String> {
    let bytes = serde_json::to_vec(v)?;
    let d = Sha256::digest(&bytes);
    Ok(d.iter().take(8).map(|b| format!("{b:02x}")).collect())
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Option<T> {
    let text = fs::read_to_string(path).ok()?;
    serde_json::from_str(&text).ok()
}

pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub work_dir: PathBuf,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig, work_dir: impl Into<PathBuf>) -> Self {
        Experiment { cfg, work_dir: work_dir.into() }
    }

    fn data_dir(&self) -> PathBuf {
        self.work_dir.join("data")
    }

    /// Generates the dataset unless a matching one is already on disk.
    pub fn ensure_data(&self) -> Result<PathBuf> {
        let dir = self.data_dir();
        let stamp = dir.join("sprite_config.json");
        let current = read_json::<SpriteConfig>(&stamp);
        if current.as_ref() != Some(&self.cfg.data) || !dir.join(MANIFEST_FILE).exists() {
            if dir.exists() {
                fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            }
            info!("generating {} clips into {}", self.cfg.data.clip_count, dir.display());
            generate_sprite_dataset(&self.cfg.data, &dir)?;
            write_json(&stamp, &self.cfg.data)?;
        }
        Ok(dir)
    }

    pub fn load_split(&self) -> Result<(FrameDataset, FrameDataset)> {
        let dir = self.ensure_data()?;
        FrameDataset::load(&dir)?.split(self.cfg.holdout_clips)
    }

    fn stage_config(&self, arm: Arm, stage: u8) -> TrainConfig {
        let mut c = self.cfg.base.clone();
        c.stage = stage;
        c.holdout_clips = self.cfg.holdout_clips;
        match arm {
            Arm::Full => c.iterations = if stage == 1 { self.cfg.stage1_iters } else { self.cfg.stage2_iters },
            Arm::NoBg => {
                c.iterations = self.cfg.stage1_iters;
                c.loss.use_bg = false;
            }
            Arm::NoFg => {
                c.iterations = self.cfg.stage1_iters;
                c.loss.use_fg = false;
            }
            Arm::SingleStage => {
                c.iterations = self.cfg.stage1_iters + self.cfg.stage2_iters;
                c.single_stage = true;
            }
        }
        c
    }

    /// Trains one stage unless a checkpoint for the same configuration exists.
    fn train_cached(
        &self,
        name: &str,
        cfg: TrainConfig,
        train: &FrameDataset,
        init: Option<&Path>,
    ) -> Result<PathBuf> {
        let key = hash_json(&(&cfg, &self.cfg.data, init.map(|p| p.display().to_string())))?;
        let dir = self.work_dir.join(format!("{name}-{key}"));
        let done = dir.join(format!("{name}.done"));
        if let Some(path) = read_json::<PathBuf>(&done) {
            if path.exists() {
                info!("reusing {}", path.display());
                return Ok(path);
            }
        }
        let init_ckpt = init.map(Checkpoint::load).transpose()?;
        let mut trainer = Trainer::new(cfg, train, init_ckpt.as_ref())?;
        if trainer.cfg.stage == 2 && !trainer.cfg.single_stage {
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            trainer = trainer.with_fit_cache(FitCache::open(&dir.join("fit_cache.jsonl"))?);
        }
        let path = trainer.run(&dir)?;
        write_json(&done, &path)?;
        Ok(path)
    }

    /// Final checkpoint of `arm`, training whatever is missing.
    pub fn checkpoint(&self, arm: Arm, train: &FrameDataset) -> Result<PathBuf> {
        match arm {
            Arm::Full => {
                let s1 = self.train_cached("stage1", self.stage_config(arm, 1), train, None)?;
                self.train_cached("stage2", self.stage_config(arm, 2), train, Some(&s1))
            }
            Arm::NoBg => self.train_cached("no_bg", self.stage_config(arm, 1), train, None),
            Arm::NoFg => self.train_cached("no_fg", self.stage_config(arm, 1), train, None),
            Arm::SingleStage => self.train_cached("single_stage", self.stage_config(arm, 1), train, None),
        }
    }

    /// Trains (if needed) and evaluates `arm` on the held-out clips.
    pub fn run_arm(&self, arm: Arm) -> Result<ArmResult> {
        let hash = hash_json(&(&self.cfg, arm))?;
        let result_path = self.work_dir.join(format!("result_{}.json", arm.name()));
        if let Some(r) = read_json::<ArmResult>(&result_path) {
            if r.config_hash == hash && r.checkpoint.exists() {
                return Ok(r);
            }
        }
        fs::create_dir_all(&self.work_dir).map_err(|e| Error::io(&self.work_dir, e))?;
        let started = Instant::now();
        let (train, held) = self.load_split()?;
        let ckpt = self.checkpoint(arm, &train)?;
        let (model, _) = load_model(&ckpt)?;
        let mut eval_cfg = self.cfg.eval.clone();
        if matches!(arm, Arm::NoBg | Arm::NoFg) {
            // only the mask statistics matter for these arms
            eval_cfg.static_clips = 0;
        }
        let outcome = evaluate(&model, &held, &eval_cfg)?;
        let r = ArmResult {
            arm,
            config_hash: hash,
            checkpoint: ckpt,
            seconds: started.elapsed().as_secs_f64(),
            outcome,
        };
        write_json(&result_path, &r)?;
        Ok(r)
    }
}
