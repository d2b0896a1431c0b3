use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::ValueEnum;
use garden_core::dataset::{load_dataset, split_train_val};
use garden_core::lora::{save_adapters, LoraConfig, DEFAULT_TARGETS};
use garden_core::networks::{ModelConfig, Vocab};
use garden_core::trainer::{train, Checkpoint, Stage, Start, TrainConfig, TrainData};
use serde::{Deserialize, Serialize};

use super::data::VOCAB_FILE;
use crate::manifest::RUN_FILE;
use crate::{usage, Ctx};

pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const FINAL_ADAPTERS: &str = "final.lora";
pub const SPLIT_FILE: &str = "split.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageArg {
    Vae,
    Diffusion,
    Lora,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Stage {
        match s {
            StageArg::Vae => Stage::Vae,
            StageArg::Diffusion => Stage::Diffusion,
            StageArg::Lora => Stage::Lora,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelArg {
    Desk,
    Tiny,
}

#[derive(clap::Args, Debug)]
pub struct Args {
    #[arg(long, value_enum)]
    stage: Option<StageArg>,
    /// Flat TOML file with any of the keys below; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for checkpoints, loss.csv and previews.
    #[arg(long)]
    out: PathBuf,
    /// Dataset root.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint of the previous stage to start from.
    #[arg(long, conflicts_with = "resume")]
    init: Option<PathBuf>,
    /// Checkpoint of this stage to continue.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Vocabulary file; defaults to `vocab.txt` in the dataset root.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    kl_weight: Option<f64>,
    #[arg(long)]
    latent_sampling: Option<bool>,
    #[arg(long)]
    preview_count: Option<usize>,
    #[arg(long)]
    preview_steps: Option<usize>,
    #[arg(long)]
    preview_prompt: Option<String>,
    /// Adapter rank; required for the lora stage.
    #[arg(long)]
    lora_rank: Option<usize>,
    /// Adapter scale numerator; defaults to the rank.
    #[arg(long)]
    lora_alpha: Option<f64>,
    /// Comma-separated glob patterns over weight names.
    #[arg(long, value_delimiter = ',')]
    lora_targets: Option<Vec<String>>,
    /// Architecture for a fresh vae run.
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    #[arg(long)]
    timesteps: Option<usize>,
    /// Weight initialization seed for a fresh vae run.
    #[arg(long)]
    init_seed: Option<u64>,
    /// Fraction of the dataset used for training; the rest is held out.
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    split_seed: Option<u64>,
}

/// Keys accepted in the `--config` file, one per flag.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    stage: Option<StageArg>,
    data: Option<PathBuf>,
    init: Option<PathBuf>,
    resume: Option<PathBuf>,
    vocab: Option<PathBuf>,
    total_steps: Option<usize>,
    checkpoint_every: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    seed: Option<u64>,
    kl_weight: Option<f64>,
    latent_sampling: Option<bool>,
    preview_count: Option<usize>,
    preview_steps: Option<usize>,
    preview_prompt: Option<String>,
    lora_rank: Option<usize>,
    lora_alpha: Option<f64>,
    lora_targets: Option<Vec<String>>,
    model: Option<ModelArg>,
    timesteps: Option<usize>,
    init_seed: Option<u64>,
    train_fraction: Option<f64>,
    split_seed: Option<u64>,
}

#[derive(Debug, Serialize)]
struct Settings {
    stage: StageArg,
    out: PathBuf,
    data: PathBuf,
    init: Option<PathBuf>,
    resume: Option<PathBuf>,
    vocab: Option<PathBuf>,
    model: ModelArg,
    timesteps: usize,
    init_seed: u64,
    train_fraction: f64,
    split_seed: u64,
    train: TrainConfig,
}

fn resolve(ctx: &Ctx, a: Args) -> Result<Settings> {
    let file = match &a.config {
        Some(p) => {
            let p = ctx.path(p);
            super::require_file(&p, "config file")?;
            let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<FileConfig>(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => FileConfig::default(),
    };
    let stage = a
        .stage
        .or(file.stage)
        .ok_or_else(|| usage("missing `--stage` (vae, diffusion or lora)"))?;
    let data = a
        .data
        .or(file.data)
        .ok_or_else(|| usage("missing `--data` (dataset root)"))?;
    let lora_rank = a.lora_rank.or(file.lora_rank);
    let lora = match (stage, lora_rank) {
        (StageArg::Lora, None) => {
            return Err(usage(
                "the lora stage needs an adapter configuration: pass `--lora-rank` (or set `lora_rank` in the config)",
            ))
        }
        (_, None) => None,
        (_, Some(rank)) => Some(LoraConfig {
            targets: a
                .lora_targets
                .or(file.lora_targets)
                .unwrap_or_else(|| DEFAULT_TARGETS.iter().map(|s| s.to_string()).collect()),
            rank,
            alpha: a.lora_alpha.or(file.lora_alpha).unwrap_or(rank as f64),
        }),
    };

    let init = a.init.or(file.init).map(|p| ctx.path(&p));
    let resume = a.resume.or(file.resume).map(|p| ctx.path(&p));
    if init.is_some() && resume.is_some() {
        return Err(usage("`--init` and `--resume` are mutually exclusive"));
    }
    if stage != StageArg::Vae && init.is_none() && resume.is_none() {
        return Err(usage(format!(
            "the {} stage starts from a checkpoint: pass `--init` or `--resume`",
            Stage::from(stage).as_str()
        )));
    }
    if stage == StageArg::Vae && init.is_some() {
        return Err(usage("the vae stage starts fresh; use `--resume` to continue a vae run"));
    }

    let d = TrainConfig::default();
    let cfg = TrainConfig {
        stage: stage.into(),
        total_steps: a.steps.or(file.total_steps).unwrap_or(d.total_steps),
        batch_size: a.batch_size.or(file.batch_size).unwrap_or(d.batch_size),
        lr: a.lr.or(file.lr).unwrap_or(d.lr),
        checkpoint_every: a.checkpoint_every.or(file.checkpoint_every).unwrap_or(d.checkpoint_every),
        preview_count: a.preview_count.or(file.preview_count).unwrap_or(d.preview_count),
        preview_prompt: a.preview_prompt.or(file.preview_prompt).unwrap_or(d.preview_prompt),
        preview_steps: a.preview_steps.or(file.preview_steps).unwrap_or(d.preview_steps),
        seed: a.seed.or(file.seed).unwrap_or(d.seed),
        kl_weight: a.kl_weight.or(file.kl_weight).unwrap_or(d.kl_weight),
        latent_sampling: a.latent_sampling.or(file.latent_sampling).unwrap_or(d.latent_sampling),
        lora,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let train_fraction = a.train_fraction.or(file.train_fraction).unwrap_or(0.9);
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(usage(format!("--train-fraction {train_fraction} must lie in (0, 1]")));
    }
    Ok(Settings {
        stage,
        out: ctx.path(&a.out),
        data: ctx.path(&data),
        init,
        resume,
        vocab: a.vocab.or(file.vocab).map(|p| ctx.path(&p)),
        model: a.model.or(file.model).unwrap_or(ModelArg::Desk),
        timesteps: a.timesteps.or(file.timesteps).unwrap_or(1000),
        init_seed: a.init_seed.or(file.init_seed).unwrap_or(0),
        train_fraction,
        split_seed: a.split_seed.or(file.split_seed).unwrap_or(0),
        train: cfg,
    })
}

#[derive(Debug, Serialize)]
struct Split {
    seed: u64,
    train_fraction: f64,
    train: Vec<String>,
    held_out: Vec<String>,
}

pub fn run(ctx: &Ctx, a: Args) -> Result<()> {
    let config_path = a.config.as_ref().map(|p| ctx.path(p));
    let s = resolve(ctx, a)?;
    super::require_dir(&s.data, "dataset root")?;
    let vocab_path = s.vocab.clone().unwrap_or_else(|| s.data.join(VOCAB_FILE));
    for ck in s.init.iter().chain(&s.resume) {
        super::require_file(ck, "checkpoint")?;
    }

    let mut m = ctx.manifest("train").config(&s, s.train.seed)?;
    if let Some(p) = &config_path {
        m.input(p)?;
    }
    m.input(&s.data)?;
    if s.vocab.is_some() {
        m.input(&vocab_path)?;
    }
    for ck in s.init.iter().chain(&s.resume) {
        m.input(ck)?;
    }

    let examples = load_dataset(&s.data)?;
    let vocab = if vocab_path.is_file() {
        Vocab::load(&vocab_path)?
    } else if s.vocab.is_some() {
        return Err(usage(format!("vocabulary `{}` does not exist", vocab_path.display())));
    } else {
        Vocab::build(examples.iter().map(|e| e.record.caption.as_str()))
    };
    let (train_set, held_out) = if s.train_fraction >= 1.0 {
        (examples, Vec::new())
    } else {
        split_train_val(&examples, s.split_seed, s.train_fraction)
    };
    let data = TrainData::new(&train_set, vocab.clone())?;
    let start = match (&s.init, &s.resume) {
        (Some(p), _) => Start::Init(Box::new(Checkpoint::load(p)?)),
        (_, Some(p)) => Start::Resume(Box::new(Checkpoint::load(p)?)),
        _ => {
            let config = match s.model {
                ModelArg::Desk => ModelConfig::desk(vocab.len(), s.timesteps),
                ModelArg::Tiny => ModelConfig::tiny(vocab.len(), s.timesteps),
            };
            config.validate().map_err(|e| usage(e.to_string()))?;
            Start::Fresh {
                config,
                init_seed: s.init_seed,
            }
        }
    };

    for name in [RUN_FILE, "loss.csv", VOCAB_FILE, SPLIT_FILE, FINAL_CHECKPOINT] {
        m.output(&s.out.join(name));
    }
    if s.stage == StageArg::Lora {
        m.output(&s.out.join(FINAL_ADAPTERS));
    }
    m.write(&s.out.join(RUN_FILE))?;

    vocab.save(&s.out.join(VOCAB_FILE))?;
    let split = Split {
        seed: s.split_seed,
        train_fraction: s.train_fraction,
        train: train_set.iter().map(|e| e.record.file_name.clone()).collect(),
        held_out: held_out.iter().map(|e| e.record.file_name.clone()).collect(),
    };
    write_json(&s.out.join(SPLIT_FILE), &split)?;

    let outcome = train(&s.train, &data, start, &s.out)?;
    outcome.state.save(&s.out.join(FINAL_CHECKPOINT))?;
    if s.stage == StageArg::Lora {
        save_adapters(&s.out.join(FINAL_ADAPTERS), &outcome.state.model.store)?;
    }
    match (outcome.losses.first(), outcome.losses.last()) {
        (Some(f), Some(l)) => println!(
            "{} stage: {} steps, loss {f:.4} -> {l:.4}, {} checkpoints in {}",
            Stage::from(s.stage).as_str(),
            outcome.losses.len(),
            outcome.checkpoints.len(),
            s.out.display()
        ),
        _ => println!("nothing to do: checkpoint already at step {}", outcome.state.step),
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
