//! Stage-one and stage-two training loops.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::checkpoint::{Checkpoint, CheckpointMeta, FORMAT_VERSION};
use crate::config::TrainConfig;
use crate::control::{binarize, fit_control, warp_mask, FitResult};
use crate::data::FrameDataset;
use crate::error::{Error, Result};
use crate::losses::{
    change_map, gan_discriminator_loss, gan_generator_loss, grad_norm, loss_bg, loss_bg_stage2, loss_bin, loss_fg,
    loss_fg_fixed, loss_percept, loss_vq, FeatureExtractor, ForegroundPrior,
};
use crate::mask::Mask;
use crate::model::Model;
use crate::nn::ArchConfig;
use crate::optim::Adam;

const GEN_OPT: &str = "opt.gen.";
const DISC_OPT: &str = "opt.disc.";

/// Appends `iter,loss_name,value` rows.
pub struct MetricsLog {
    out: BufWriter<fs::File>,
    path: PathBuf,
}

impl MetricsLog {
    pub fn create(path: &Path, append: bool) -> Result<Self> {
        let exists = path.exists();
        let file = fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut log = MetricsLog { out: BufWriter::new(file), path: path.to_path_buf() };
        if !(append && exists) {
            writeln!(log.out, "iter,loss_name,value").map_err(|e| Error::io(path, e))?;
        }
        Ok(log)
    }

    pub fn record(&mut self, iter: usize, values: &[(&str, f64)]) -> Result<()> {
        for (name, v) in values {
            writeln!(self.out, "{iter},{name},{v}").map_err(|e| Error::io(&self.path, e))?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
struct CacheEntry<'a> {
    key: &'a str,
    fit: FitResult,
}

/// Fitted pseudo-controls keyed by `clip:t:masknet-hash`, mirrored to a
/// JSON-lines file when a path is given.
#[derive(Default)]
pub struct FitCache {
    entries: HashMap<String, FitResult>,
    file: Option<(PathBuf, BufWriter<fs::File>)>,
    pub hits: usize,
    pub misses: usize,
}

impl FitCache {
    pub fn open(path: &Path) -> Result<Self> {
        let mut entries = HashMap::new();
        if path.exists() {
            let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
            for line in BufReader::new(f).lines() {
                let line = line.map_err(|e| Error::io(path, e))?;
                // a torn last line from an interrupted run is dropped
                #[derive(Deserialize)]
                struct Owned {
                    key: String,
                    fit: FitResult,
                }
                if let Ok(e) = serde_json::from_str::<Owned>(&line) {
                    entries.insert(e.key, e.fit);
                }
            }
        }
        let file = fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(FitCache { entries, file: Some((path.to_path_buf(), BufWriter::new(file))), hits: 0, misses: 0 })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get_or_fit(&mut self, key: String, fit: impl FnOnce() -> Result<FitResult>) -> Result<FitResult> {
        if let Some(r) = self.entries.get(&key) {
            self.hits += 1;
            return Ok(*r);
        }
        self.misses += 1;
        let r = fit()?;
        if let Some((path, out)) = &mut self.file {
            let line = serde_json::to_string(&CacheEntry { key: &key, fit: r })?;
            writeln!(out, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        self.entries.insert(key, r);
        Ok(r)
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some((path, out)) = &mut self.file {
            out.flush().map_err(|e| Error::io(path.as_path(), e))?;
        }
        Ok(())
    }
}

/// Scalars from one optimization step.
#[derive(Clone, Debug, Default)]
pub struct StepStats {
    pub iter: usize,
    pub values: Vec<(&'static str, f64)>,
}

impl StepStats {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.iter().find(|(n, _)| *n == name).map(|(_, v)| *v)
    }
}

pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub model: Model,
    data: &'a FrameDataset,
    percept: FeatureExtractor,
    gen_opt: Adam,
    disc_opt: Adam,
    pub iteration: usize,
    pub fit_cache: FitCache,
    masknet_hash: String,
    pub skipped_pairs: usize,
    pub used_pairs: usize,
}

fn scalar(t: &Tensor) -> f64 {
    t.double_value(&[])
}

fn check_finite(values: &[(&'static str, f64)], iter: usize) -> Result<()> {
    for (name, v) in values {
        if !v.is_finite() {
            return Err(Error::NonFinite { term: name.to_string(), iter });
        }
    }
    Ok(())
}

impl<'a> Trainer<'a> {
    /// Builds a trainer. Stage two needs `init`, a stage-one checkpoint; a
    /// checkpoint of the same stage resumes it, optimizer state included.
    pub fn new(cfg: TrainConfig, data: &'a FrameDataset, init: Option<&Checkpoint>) -> Result<Self> {
        cfg.validate()?;
        let arch = ArchConfig::for_profile(cfg.profile);
        let resume = init.filter(|c| c.meta.stage == cfg.stage && !(cfg.stage == 2 && cfg.single_stage));
        let mut model = match init {
            Some(c) => {
                if c.meta.height != data.height || c.meta.width != data.width {
                    return Err(Error::Shape(format!(
                        "checkpoint is {}x{}, data is {}x{}",
                        c.meta.height, c.meta.width, data.height, data.width
                    )));
                }
                c.model()?
            }
            None => {
                if cfg.stage == 2 && !cfg.single_stage {
                    return Err(Error::Config("stage 2 requires a stage-1 checkpoint".into()));
                }
                Model::new(&arch, data.height, data.width, cfg.seed)?
            }
        };
        let percept = match &cfg.vgg_weights {
            Some(p) => FeatureExtractor::vgg16(p, Kind::Float)?,
            None => FeatureExtractor::random(model.arch.percept_channels, cfg.percept_seed, Kind::Float),
        };
        let mut gen_params = Vec::new();
        let mask_trainable = cfg.stage == 1 || cfg.single_stage;
        for (name, t) in model.named_tensors() {
            let is_mask = name.starts_with(crate::model::MASKNET_PREFIX);
            let is_gen = name.starts_with(crate::model::GENERATOR_PREFIX);
            if is_gen || (is_mask && mask_trainable) {
                gen_params.push((name, t));
            }
        }
        if !mask_trainable {
            model.masknet_vs.freeze();
        }
        let disc_params = model
            .named_tensors()
            .into_iter()
            .filter(|(n, _)| n.starts_with(crate::model::DISC_PREFIX))
            .collect();
        let mut gen_opt = Adam::new(gen_params, cfg.lr);
        let mut disc_opt = Adam::new(disc_params, cfg.disc_lr);
        let mut iteration = 0;
        if let Some(c) = resume {
            gen_opt.load_state(GEN_OPT, &c.tensors)?;
            disc_opt.load_state(DISC_OPT, &c.tensors)?;
            iteration = c.meta.iteration;
        }
        let masknet_hash = model.masknet_hash();
        Ok(Trainer {
            cfg,
            model,
            data,
            percept,
            gen_opt,
            disc_opt,
            iteration,
            fit_cache: FitCache::default(),
            masknet_hash,
            skipped_pairs: 0,
            used_pairs: 0,
        })
    }

    pub fn with_fit_cache(mut self, cache: FitCache) -> Self {
        self.fit_cache = cache;
        self
    }

    /// Pair indices for iteration `iter`, a pure function of seed and iteration.
    pub fn batch_indices(&self, iter: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ (iter as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let n = self.data.pair_count();
        (0..self.cfg.batch_size).map(|_| rng.gen_range(0..n)).collect()
    }

    fn gan_active(&self) -> bool {
        (self.cfg.stage == 2 && !self.cfg.single_stage) || self.iteration >= self.cfg.loss.gan.warmup_iters
    }

    /// One generator-side step followed by one discriminator step.
    pub fn step(&mut self) -> Result<StepStats> {
        let stats = if self.cfg.stage == 1 || self.cfg.single_stage {
            self.step_stage1()?
        } else {
            self.step_stage2()?
        };
        self.iteration += 1;
        Ok(stats)
    }

    /// Adaptive GAN term plus its weight; `rec` is the reconstruction part of
    /// the generator objective.
    fn gan_term(&self, rec: &Tensor, fake: &Tensor) -> (Tensor, f64, f64) {
        if !self.gan_active() {
            return (Tensor::zeros([], (Kind::Float, fake.device())), 0.0, 0.0);
        }
        let g_loss = gan_generator_loss(&self.model.discriminate(fake));
        let last = self.model.generator.decoder.last_layer();
        let w = self.cfg.loss.gan.weight(self.iteration, grad_norm(rec, last), grad_norm(&g_loss, last));
        let v = scalar(&g_loss);
        (g_loss * w, w, v)
    }

    fn disc_step(&mut self, real: &Tensor, fake: &Tensor) -> Result<Option<f64>> {
        if !self.gan_active() {
            return Ok(None);
        }
        let d_loss = gan_discriminator_loss(&self.model.discriminate(real), &self.model.discriminate(&fake.detach()));
        let v = scalar(&d_loss);
        check_finite(&[("gan_disc", v)], self.iteration)?;
        self.disc_opt.zero_grad();
        d_loss.backward();
        self.disc_opt.step();
        Ok(Some(v))
    }

    fn step_stage1(&mut self) -> Result<StepStats> {
        let iter = self.iteration;
        let idx = self.batch_indices(iter);
        let (ft, fnx) = self.data.batch(&idx, Kind::Float)?;
        let l = &self.cfg.loss;
        let m = self.model.masknet.forward(&ft);
        // single-stage training conditions on the mask of the target frame
        let cond = if self.cfg.single_stage { self.model.masknet.forward(&fnx) } else { m.shallow_clone() };
        let g = self.model.generator.generate(&ft, &cond)?;
        let vq = loss_vq(&fnx, &g.frame, &[&g.z_fg, &g.z_bg], &[&g.q_fg.zq, &g.q_bg.zq])?;
        let percept = loss_percept(&g.frame, &fnx, &self.percept)?;
        let rec = &vq.total * l.vq + &percept * l.percept;
        let (gan, gan_w, gan_raw) = self.gan_term(&rec, &g.frame);

        let mu = change_map(&ft, &fnx, l.tau)?;
        let bg = loss_bg(&ft, &fnx, &m)?;
        let fg = match l.prior {
            ForegroundPrior::Dynamic => loss_fg(&m, &mu, l.symmetric_fg)?,
            ForegroundPrior::Fixed(p) => loss_fg_fixed(&m, p, l.symmetric_fg)?,
        };
        let bin = loss_bin(&m);
        let (lambda_bg, lambda_fg) = l.ratio.weights(iter, l.fg);
        let mut total = &rec + &gan;
        if l.use_bg {
            total = total + &bg * lambda_bg;
        }
        if l.use_fg {
            total = total + &fg * lambda_fg;
        }
        if l.use_bin {
            total = total + &bin * l.bin;
        }
        if self.cfg.single_stage {
            let bg2 = loss_bg_stage2(&g.frame, &fnx, &cond)?;
            total = total + bg2 * l.bg_stage2;
        }
        let mut values = vec![
            ("total", scalar(&total)),
            ("vq_rec", scalar(&vq.reconstruction)),
            ("vq_codebook", scalar(&vq.codebook)),
            ("vq_commit", scalar(&vq.commitment)),
            ("percept", scalar(&percept)),
            ("gan_gen", gan_raw),
            ("gan_weight", gan_w),
            ("bg", scalar(&bg)),
            ("fg", scalar(&fg)),
            ("bin", scalar(&bin)),
            ("lambda_bg", lambda_bg),
            ("mask_mean", scalar(&m.mean(Kind::Float))),
            ("change_mean", scalar(&mu.mean(Kind::Float))),
        ];
        check_finite(&values, iter)?;
        self.gen_opt.zero_grad();
        total.backward();
        self.gen_opt.step();
        if let Some(d) = self.disc_step(&fnx, &g.frame)? {
            values.push(("gan_disc", d));
        }
        Ok(StepStats { iter, values })
    }

    /// Fitted control for pair `i` given its predicted soft masks.
    fn pseudo_control(&mut self, pair: usize, m_t: &Mask, m_next: &Mask) -> Result<Option<Mask>> {
        let (c, t) = self.data.pair(pair);
        let key = format!("{}:{}:{}", self.data.clips[c].id, t, &self.masknet_hash[..16]);
        let (mode, fit_cfg) = (self.cfg.fit_mode, self.cfg.fit);
        let fit = if m_t.sum() <= 0.0 {
            None
        } else {
            Some(self.fit_cache.get_or_fit(key, || fit_control(m_t, m_next, mode, &fit_cfg))?)
        };
        match fit {
            Some(f) if f.residual <= self.cfg.fit_max_residual => {
                let mc = match f.params.check() {
                    Ok(()) => binarize(&warp_mask(m_t, &f.params)?),
                    Err(_) => return Ok(None),
                };
                Ok(Some(mc))
            }
            _ => Ok(None),
        }
    }

    fn step_stage2(&mut self) -> Result<StepStats> {
        let iter = self.iteration;
        let mut kept = Vec::new();
        let mut masks = Vec::new();
        let mut attempt = 0;
        while kept.is_empty() {
            if attempt >= 16 {
                return Err(Error::InvalidInput(format!(
                    "no usable pairs at iteration {iter}: every fit exceeded residual {}",
                    self.cfg.fit_max_residual
                )));
            }
            let idx = if attempt == 0 {
                self.batch_indices(iter)
            } else {
                self.batch_indices(iter.wrapping_add(attempt * 1_000_003))
            };
            attempt += 1;
            let (ft, fnx) = self.data.batch(&idx, Kind::Float)?;
            let (mt, mn) = tch::no_grad(|| (self.model.masknet.forward(&ft), self.model.masknet.forward(&fnx)));
            for (j, &pair) in idx.iter().enumerate() {
                let a = Mask::from_tensor(&mt.get(j as i64))?;
                let b = Mask::from_tensor(&mn.get(j as i64))?;
                match self.pseudo_control(pair, &a, &b)? {
                    Some(mc) => {
                        kept.push(pair);
                        masks.push(mc);
                    }
                    None => self.skipped_pairs += 1,
                }
            }
        }
        self.used_pairs += kept.len();
        let (ft, fnx) = self.data.batch(&kept, Kind::Float)?;
        let mc = Mask::stack(&masks.iter().collect::<Vec<_>>(), Kind::Float)?;
        let l = &self.cfg.loss;
        let g = self.model.generator.generate(&ft, &mc)?;
        let vq = loss_vq(&fnx, &g.frame, &[&g.z_fg, &g.z_bg], &[&g.q_fg.zq, &g.q_bg.zq])?;
        let percept = loss_percept(&g.frame, &fnx, &self.percept)?;
        let rec = &vq.total * l.vq + &percept * l.percept;
        let (gan, gan_w, gan_raw) = self.gan_term(&rec, &g.frame);
        let bg2 = loss_bg_stage2(&g.frame, &fnx, &mc)?;
        let total = &rec + &gan + &bg2 * l.bg_stage2;
        let mut values = vec![
            ("total", scalar(&total)),
            ("vq_rec", scalar(&vq.reconstruction)),
            ("vq_codebook", scalar(&vq.codebook)),
            ("vq_commit", scalar(&vq.commitment)),
            ("percept", scalar(&percept)),
            ("gan_gen", gan_raw),
            ("gan_weight", gan_w),
            ("bg_stage2", scalar(&bg2)),
            ("kept_pairs", kept.len() as f64),
        ];
        check_finite(&values, iter)?;
        self.gen_opt.zero_grad();
        total.backward();
        self.gen_opt.step();
        if let Some(d) = self.disc_step(&fnx, &g.frame)? {
            values.push(("gan_disc", d));
        }
        Ok(StepStats { iter, values })
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            format_version: FORMAT_VERSION,
            stage: self.cfg.stage,
            iteration: self.iteration,
            height: self.data.height,
            width: self.data.width,
            arch: self.model.arch.clone(),
            config: self.cfg.clone(),
            masknet_hash: self.model.masknet_hash(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = self.model.named_tensors();
        tensors.extend(self.gen_opt.state(GEN_OPT));
        tensors.extend(self.disc_opt.state(DISC_OPT));
        Checkpoint::save(path, &self.meta(), &tensors)
    }

    /// The frozen-mask contract of stage two.
    pub fn check_masknet_unchanged(&self) -> Result<()> {
        if self.cfg.stage == 2 && !self.cfg.single_stage && self.model.masknet_hash() != self.masknet_hash {
            return Err(Error::Checkpoint("mask network parameters changed during stage 2".into()));
        }
        Ok(())
    }

    /// Runs until `cfg.iterations`, logging every step and checkpointing into
    /// `out_dir` on cadence and at the end. Returns the final checkpoint path.
    pub fn run(&mut self, out_dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let mut log = MetricsLog::create(&out_dir.join("metrics.csv"), self.iteration > 0)?;
        let tag = if self.cfg.single_stage { "single".to_string() } else { format!("stage{}", self.cfg.stage) };
        let started = std::time::Instant::now();
        while self.iteration < self.cfg.iterations {
            let stats = self.step()?;
            log.record(stats.iter, &stats.values)?;
            let done = self.iteration;
            if done % 50 == 0 || done == self.cfg.iterations {
                log.flush()?;
                self.fit_cache.flush()?;
                info!(
                    "{tag} iter {done}/{} total {:.4} ({:.2}s/iter)",
                    self.cfg.iterations,
                    stats.get("total").unwrap_or(f64::NAN),
                    started.elapsed().as_secs_f64() / (done as f64).max(1.0)
                );
            }
            if self.cfg.checkpoint_every > 0 && done % self.cfg.checkpoint_every == 0 && done < self.cfg.iterations {
                self.save(&out_dir.join(format!("{tag}_iter{done:06}.lcvg")))?;
            }
        }
        log.flush()?;
        self.fit_cache.flush()?;
        self.check_masknet_unchanged()?;
        if self.cfg.stage == 2 && !self.cfg.single_stage {
            let seen = self.used_pairs + self.skipped_pairs;
            if seen > 0 {
                let rate = self.skipped_pairs as f64 / seen as f64;
                info!("stage2 fit skip rate {:.3} ({} of {seen})", rate, self.skipped_pairs);
                if rate > 0.5 {
                    warn!("more than half of the stage-2 pairs were skipped");
                }
            }
        }
        let path = out_dir.join(format!("{tag}.lcvg"));
        self.save(&path)?;
        Ok(path)
    }
}
