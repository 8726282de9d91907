use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use lcvg_core::checkpoint::{load_model, Checkpoint};
use lcvg_core::config::{KvConfig, TrainConfig};
use lcvg_core::control::{fit_control, ControlJson, ControlMode, ControlParams, FitConfig};
use lcvg_core::data::{generate_sprite_dataset, Frame, FrameDataset, SpriteConfig, SpriteShape, StoredClip};
use lcvg_core::evaluate::{evaluate, EvalConfig};
use lcvg_core::experiment::{Arm, Experiment, ExperimentConfig};
use lcvg_core::mask::Mask;
use lcvg_core::rollout::{mimic, rollout, Rollout};
use lcvg_core::trainer::{FitCache, Trainer};

mod manifest;

use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "lcvg", version, about = "Layered controllable video generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic moving-sprite dataset.
    SynthData(SynthArgs),
    /// Train stage 1 (mask discovery and generation) or stage 2 (control fine-tuning).
    Train(TrainArgs),
    /// Fit the control that warps one mask onto another; prints the JSON record.
    FitControl(FitArgs),
    /// Generate frames from a start frame and a control sequence.
    Rollout(RolloutArgs),
    /// Drive a start frame with the masks of another clip.
    Mimic(MimicArgs),
    /// Evaluate a checkpoint on held-out clips and write report.json.
    Eval(EvalArgs),
    /// Run the HTTP session service.
    Serve(ServeArgs),
    /// Run the desk-scale experiment and its ablation arms.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    clips: usize,
    #[arg(long, default_value_t = 17)]
    length: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    /// Comma-separated subset of disk, square, triangle.
    #[arg(long, default_value = "disk,square,triangle")]
    shapes: String,
    #[arg(long, default_value_t = 1)]
    background_seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    stage: u8,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.lr=0.0004`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Stage-1 checkpoint to fine-tune (stage 2), or a checkpoint to resume.
    #[arg(long)]
    from_checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    /// Source mask PNG.
    #[arg(long)]
    from: PathBuf,
    /// Target mask PNG.
    #[arg(long)]
    to: PathBuf,
    #[arg(long, default_value = "affine")]
    mode: ControlMode,
    #[arg(long, default_value_t = 1000)]
    iterations: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long)]
    coarse_to_fine: bool,
}

#[derive(Args)]
struct RolloutArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Start frame PNG.
    #[arg(long)]
    frame: PathBuf,
    /// JSON array of control records.
    #[arg(long, conflicts_with = "shift")]
    controls: Option<PathBuf>,
    /// Constant positional control `dx,dy` repeated for --steps frames.
    #[arg(long, value_name = "DX,DY", allow_hyphen_values = true)]
    shift: Option<String>,
    #[arg(long, default_value_t = 16)]
    steps: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MimicArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of driving frames (000000.png, ...).
    #[arg(long)]
    driving: PathBuf,
    /// Start frame PNG of the target.
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, alias = "ckpt")]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Evaluate the last N clips; 0 evaluates every clip.
    #[arg(long, default_value_t = 50)]
    holdout: usize,
    #[arg(long, default_value_t = 16)]
    horizon: usize,
    /// Output directory for report.json; defaults to the checkpoint's directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    /// Checkpoint to serve; `ID=PATH` names the model. Repeatable.
    #[arg(long = "checkpoint", required = true)]
    checkpoints: Vec<String>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    /// Idle minutes before a session is dropped.
    #[arg(long, default_value_t = 30)]
    ttl_minutes: u64,
    #[arg(long, default_value_t = lcvg_service::DEFAULT_HISTORY)]
    history: usize,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    work: PathBuf,
    /// Comma-separated arms: full, no_bg, no_fg, single_stage.
    #[arg(long, default_value = "full,no_bg,no_fg,single_stage")]
    arms: String,
    /// key = value file with train/loss/fit overrides for every arm.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    clips: Option<usize>,
    #[arg(long)]
    stage1_iters: Option<usize>,
    #[arg(long)]
    stage2_iters: Option<usize>,
}

fn load_train_config(path: Option<&Path>, overrides: &[String], base: &TrainConfig) -> Result<(TrainConfig, KvConfig)> {
    let mut kv = base.to_kv();
    if let Some(p) = path {
        let file = KvConfig::load(p)?;
        kv.apply_overrides(&[file.to_text()])?;
    }
    kv.apply_overrides(overrides)?;
    let cfg = TrainConfig::from_kv(&kv)?;
    Ok((cfg, kv))
}

fn synth_data(a: SynthArgs, m: &mut RunManifest) -> Result<()> {
    let shapes = a.shapes.split(',').map(|s| s.parse::<SpriteShape>()).collect::<Result<Vec<_>, _>>()?;
    let cfg = SpriteConfig {
        height: a.height,
        width: a.width,
        shapes,
        clip_length: a.length,
        clip_count: a.clips,
        seed: a.seed,
        background_seed: a.background_seed,
        ..SpriteConfig::default()
    };
    cfg.validate()?;
    let records = generate_sprite_dataset(&cfg, &a.out)?;
    m.config = serde_json::to_value(&cfg)?;
    m.write(&a.out)?;
    println!("wrote {} clips to {}", records.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs, m: &mut RunManifest) -> Result<()> {
    let base = TrainConfig { stage: a.stage, ..TrainConfig::default() };
    let (mut cfg, kv) = load_train_config(a.config.as_deref(), &a.overrides, &base)?;
    cfg.stage = a.stage;
    if cfg.stage == 2 && !cfg.single_stage && a.from_checkpoint.is_none() {
        bail!("stage 2 requires --from-checkpoint pointing at a stage-1 checkpoint");
    }
    let init = a.from_checkpoint.as_deref().map(Checkpoint::load).transpose()?;
    if let Some(c) = &init {
        if cfg.stage == 2 && c.meta.stage != 1 && c.meta.stage != 2 {
            bail!("checkpoint stage {} cannot seed stage 2", c.meta.stage);
        }
        if c.meta.config.profile != cfg.profile {
            bail!("checkpoint profile {:?} does not match model.profile {:?}", c.meta.config.profile, cfg.profile);
        }
    }
    m.add_input(&a.data)?;
    if let Some(p) = &a.from_checkpoint {
        m.add_input(p)?;
    }
    m.config = serde_json::Value::String(kv.to_text());
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    m.write(&a.out)?;
    let data = FrameDataset::load(&a.data)?;
    let train = if cfg.holdout_clips > 0 && cfg.holdout_clips < data.clips.len() {
        data.split(cfg.holdout_clips)?.0
    } else {
        data
    };
    let mut trainer = Trainer::new(cfg, &train, init.as_ref())?;
    if trainer.cfg.stage == 2 && !trainer.cfg.single_stage {
        trainer = trainer.with_fit_cache(FitCache::open(&a.out.join("fit_cache.jsonl"))?);
    }
    let path = trainer.run(&a.out)?;
    println!("{}", path.display());
    Ok(())
}

fn fit(a: FitArgs) -> Result<()> {
    let from = Mask::load_png(&a.from)?;
    let to = Mask::load_png(&a.to)?;
    let cfg = FitConfig { iterations: a.iterations, lr: a.lr, coarse_to_fine: a.coarse_to_fine };
    let r = fit_control(&from, &to, a.mode, &cfg)?;
    let control = match a.mode {
        ControlMode::Positional => ControlParams::Positional { dx: r.params.dx, dy: r.params.dy },
        _ => ControlParams::Affine(r.params),
    };
    let out = serde_json::json!({ "control": control.to_json(), "residual": r.residual });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn parse_shift(s: &str) -> Result<(f64, f64)> {
    let (x, y) = s.split_once(',').context("--shift expects `dx,dy`")?;
    Ok((x.trim().parse().context("bad dx")?, y.trim().parse().context("bad dy")?))
}

fn write_rollout(r: &Rollout, out: &Path) -> Result<()> {
    let masks = out.join("control_masks");
    fs::create_dir_all(&masks).with_context(|| format!("creating {}", masks.display()))?;
    for (i, (f, mc)) in r.frames.iter().zip(&r.control_masks).enumerate() {
        f.save_png(&out.join(format!("{:06}.png", i + 1)))?;
        mc.save_png(&masks.join(format!("{:06}.png", i + 1)))?;
    }
    Ok(())
}

fn run_rollout(a: RolloutArgs, m: &mut RunManifest) -> Result<()> {
    let (model, _) = load_model(&a.checkpoint)?;
    let f0 = Frame::load_png(&a.frame)?;
    let controls: Vec<ControlParams> = match (&a.controls, &a.shift) {
        (Some(p), _) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let records: Vec<ControlJson> =
                serde_json::from_str(&text).with_context(|| format!("{}: expected a JSON array of controls", p.display()))?;
            m.add_input(p)?;
            records.iter().map(|r| r.to_control()).collect::<Result<_, _>>()?
        }
        (None, Some(s)) => {
            let (dx, dy) = parse_shift(s)?;
            vec![ControlParams::Positional { dx, dy }; a.steps]
        }
        (None, None) => bail!("give --controls FILE or --shift DX,DY"),
    };
    m.add_input(&a.checkpoint)?;
    m.add_input(&a.frame)?;
    m.config = serde_json::to_value(controls.iter().map(|c| c.to_json()).collect::<Vec<_>>())?;
    let r = rollout(&model, &f0, &controls)?;
    write_rollout(&r, &a.out)?;
    m.write(&a.out)?;
    println!("wrote {} frames to {}", r.frames.len(), a.out.display());
    Ok(())
}

fn run_mimic(a: MimicArgs, m: &mut RunManifest) -> Result<()> {
    let (model, _) = load_model(&a.checkpoint)?;
    let mut paths: Vec<PathBuf> = fs::read_dir(&a.driving)
        .with_context(|| format!("reading {}", a.driving.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    paths.sort();
    let driving = paths.iter().map(|p| Frame::load_png(p)).collect::<Result<Vec<_>, _>>()?;
    let target = Frame::load_png(&a.target)?;
    m.add_input(&a.checkpoint)?;
    m.add_input(&a.driving)?;
    m.add_input(&a.target)?;
    let r = mimic(&model, &driving, &target)?;
    write_rollout(&r, &a.out)?;
    m.write(&a.out)?;
    println!("wrote {} frames to {}", r.frames.len(), a.out.display());
    Ok(())
}

fn run_eval(a: EvalArgs, m: &mut RunManifest) -> Result<()> {
    let (model, meta) = load_model(&a.checkpoint)?;
    let data = FrameDataset::load(&a.data)?;
    if data.height != meta.height || data.width != meta.width {
        bail!("data is {}x{}, checkpoint expects {}x{}", data.height, data.width, meta.height, meta.width);
    }
    let held = if a.holdout == 0 || a.holdout >= data.clips.len() {
        data
    } else {
        let keep: Vec<StoredClip> = data.clips[data.clips.len() - a.holdout..].to_vec();
        FrameDataset::from_clips(keep)?
    };
    let cfg = EvalConfig { horizon: a.horizon, ..EvalConfig::default() };
    let outcome = evaluate(&model, &held, &cfg)?;
    let out = a.out.unwrap_or_else(|| a.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default());
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&outcome.report)?)?;
    fs::write(out.join("eval_details.json"), serde_json::to_string_pretty(&outcome)?)?;
    m.add_input(&a.checkpoint)?;
    m.add_input(&a.data)?;
    m.config = serde_json::to_value(&cfg)?;
    m.write(&out)?;
    println!("{}", serde_json::to_string_pretty(&outcome.report)?);
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let specs: Vec<(Option<String>, PathBuf)> = a
        .checkpoints
        .iter()
        .map(|s| match s.split_once('=') {
            Some((id, p)) => (Some(id.to_string()), PathBuf::from(p)),
            None => (None, PathBuf::from(s)),
        })
        .collect();
    let refs: Vec<(Option<String>, &Path)> = specs.iter().map(|(i, p)| (i.clone(), p.as_path())).collect();
    let mut state = lcvg_service::AppState::load(&refs)?;
    state.ttl = std::time::Duration::from_secs(a.ttl_minutes * 60);
    state.history_cap = a.history;
    for id in state.models.keys() {
        log::info!("serving model `{id}`");
    }
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(lcvg_service::serve(state, a.addr)).context("server failed")?;
    Ok(())
}

fn ablate(a: AblateArgs, m: &mut RunManifest) -> Result<()> {
    let mut cfg = ExperimentConfig::default();
    let (base, kv) = load_train_config(a.config.as_deref(), &a.overrides, &cfg.base)?;
    cfg.base = base;
    if let Some(n) = a.clips {
        cfg.data.clip_count = n;
    }
    if let Some(n) = a.stage1_iters {
        cfg.stage1_iters = n;
    }
    if let Some(n) = a.stage2_iters {
        cfg.stage2_iters = n;
    }
    let arms = a.arms.split(',').map(|s| s.trim().parse::<Arm>()).collect::<Result<Vec<_>, _>>()?;
    m.config = serde_json::json!({ "experiment": cfg, "overrides": kv.to_text() });
    fs::create_dir_all(&a.work).with_context(|| format!("creating {}", a.work.display()))?;
    m.write(&a.work)?;
    let exp = Experiment::new(cfg, &a.work);
    let mut rows = Vec::new();
    for arm in arms {
        let r = exp.run_arm(arm)?;
        let o = &r.outcome;
        println!(
            "{:<13} rmsed {:>7.3} px  iou {:.3}  mask mean {:.3}  bg change {:.4}  psnr {:.2}",
            arm.name(),
            o.report.rmsed_px,
            o.report.mean_iou,
            o.mean_mask,
            o.background_change,
            o.report.mean_psnr
        );
        rows.push(r);
    }
    fs::write(a.work.join("ablation.json"), serde_json::to_string_pretty(&rows)?)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut m = RunManifest::new()?;
    match cli.command {
        Command::SynthData(a) => synth_data(a, &mut m),
        Command::Train(a) => train(a, &mut m),
        Command::FitControl(a) => fit(a),
        Command::Rollout(a) => run_rollout(a, &mut m),
        Command::Mimic(a) => run_mimic(a, &mut m),
        Command::Eval(a) => run_eval(a, &mut m),
        Command::Serve(a) => serve(a),
        Command::Ablate(a) => ablate(a, &mut m),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
