use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use garden_core::dataset::load_dataset;
use garden_core::evaluator::{
    contrastive_train, evaluate as score, retrieval_accuracy, shuffle_control, ContrastiveConfig, DualEncoder,
    EncoderConfig, RetrievalReport,
};
use garden_core::image::ImageTensor;
use serde::Serialize;

use super::train::ModelArg;
use crate::manifest::{beside, RUN_FILE};
use crate::{usage, Ctx};

pub const ENCODER_FILE: &str = "encoder.gdev";
pub const METRICS_FILE: &str = "metrics.json";
pub const DISTRACTORS: usize = 8;

#[derive(clap::Args, Debug)]
pub struct TrainArgs {
    /// Dataset root to train on.
    #[arg(long)]
    data: PathBuf,
    /// Disjoint dataset root for retrieval metrics.
    #[arg(long)]
    held_out: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = ContrastiveConfig::default().steps)]
    steps: usize,
    #[arg(long, default_value_t = ContrastiveConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = ContrastiveConfig::default().lr)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = ModelArg::Desk)]
    model: ModelArg,
}

#[derive(Serialize)]
struct TrainSettings {
    data: PathBuf,
    held_out: Option<PathBuf>,
    out: PathBuf,
    training: ContrastiveConfig,
    encoder: EncoderConfig,
    distractors: usize,
}

#[derive(Serialize)]
struct Metrics {
    trained_steps: usize,
    skipped_steps: usize,
    first_loss: Option<f32>,
    last_loss: Option<f32>,
    temperature: f64,
    retrieval: Option<RetrievalReport>,
    matched_mean_cos: Option<f64>,
    deranged_mean_cos: Option<f64>,
}

pub fn train(ctx: &Ctx, a: TrainArgs) -> Result<()> {
    let data = ctx.path(&a.data);
    let held_out = a.held_out.as_ref().map(|p| ctx.path(p));
    let out = ctx.path(&a.out);
    super::require_dir(&data, "dataset root")?;
    if let Some(h) = &held_out {
        super::require_dir(h, "held-out dataset root")?;
    }
    let training = ContrastiveConfig {
        steps: a.steps,
        batch_size: a.batch_size,
        lr: a.lr,
        seed: a.seed,
    };
    training.validate().map_err(|e| usage(e.to_string()))?;
    let encoder = match a.model {
        ModelArg::Desk => EncoderConfig::desk(0),
        ModelArg::Tiny => EncoderConfig::tiny(0),
    };
    let settings = TrainSettings {
        data: data.clone(),
        held_out: held_out.clone(),
        out: out.clone(),
        training,
        encoder: encoder.clone(),
        distractors: DISTRACTORS,
    };
    let mut m = ctx.manifest("train-encoder").config(&settings, a.seed)?;
    m.input(&data)?;
    if let Some(h) = &held_out {
        m.input(h)?;
    }
    let examples = load_dataset(&data)?;
    let held = held_out.as_deref().map(load_dataset).transpose()?;
    for name in [RUN_FILE, ENCODER_FILE, METRICS_FILE, "loss.csv"] {
        m.output(&out.join(name));
    }
    m.write(&out.join(RUN_FILE))?;

    let outcome = contrastive_train(&examples, encoder, &training)?;
    outcome.encoder.save(&out.join(ENCODER_FILE))?;
    let mut csv = String::from("step,loss\n");
    for (step, loss) in &outcome.losses {
        writeln!(csv, "{step},{loss}").expect("string write");
    }
    fs::write(out.join("loss.csv"), csv).context("writing loss.csv")?;

    let (retrieval, control) = match &held {
        Some(h) => (
            Some(retrieval_accuracy(&outcome.encoder, h, DISTRACTORS, a.seed)?),
            Some(shuffle_control(&outcome.encoder, h, a.seed)?),
        ),
        None => (None, None),
    };
    let metrics = Metrics {
        trained_steps: outcome.losses.len(),
        skipped_steps: outcome.skipped.len(),
        first_loss: outcome.losses.first().map(|l| l.1),
        last_loss: outcome.losses.last().map(|l| l.1),
        temperature: outcome.encoder.temperature(),
        retrieval,
        matched_mean_cos: control.as_ref().map(|c| c.matched_mean),
        deranged_mean_cos: control.as_ref().map(|c| c.deranged_mean),
    };
    fs::write(out.join(METRICS_FILE), serde_json::to_string_pretty(&metrics)? + "\n").context("writing metrics")?;
    match &metrics.retrieval {
        Some(r) => println!(
            "encoder written to {}; held-out top-1 {:.3} over {} trials",
            out.display(),
            r.accuracy,
            r.trials
        ),
        None => println!("encoder written to {}", out.display()),
    }
    Ok(())
}

#[derive(clap::Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    encoder: PathBuf,
    /// Directory of generated PNGs.
    #[arg(long)]
    images: PathBuf,
    /// Tab-separated `file_name<TAB>prompt` lines.
    #[arg(long)]
    prompts: PathBuf,
    /// Directory of reference PNGs with the same file names.
    #[arg(long)]
    refs: Option<PathBuf>,
    /// Report JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct EvalSettings {
    encoder: PathBuf,
    images: PathBuf,
    prompts: PathBuf,
    refs: Option<PathBuf>,
    out: PathBuf,
}

/// Parses `file_name<TAB>prompt` lines.
pub fn read_prompt_table(path: &Path) -> Result<Vec<(String, String)>> {
    let mut rows = Vec::new();
    for (i, line) in super::read_lines(path)?.into_iter().enumerate() {
        let Some((name, prompt)) = line.split_once('\t') else {
            return Err(usage(format!("{}: line {} has no tab", path.display(), i + 1)));
        };
        let (name, prompt) = (name.trim(), prompt.trim());
        if name.is_empty() || prompt.is_empty() {
            return Err(usage(format!("{}: line {} has an empty field", path.display(), i + 1)));
        }
        rows.push((name.to_string(), prompt.to_string()));
    }
    if rows.is_empty() {
        return Err(usage(format!("{} lists no prompts", path.display())));
    }
    Ok(rows)
}

pub fn evaluate(ctx: &Ctx, a: EvalArgs) -> Result<()> {
    let s = EvalSettings {
        encoder: ctx.path(&a.encoder),
        images: ctx.path(&a.images),
        prompts: ctx.path(&a.prompts),
        refs: a.refs.as_ref().map(|p| ctx.path(p)),
        out: ctx.path(&a.out),
    };
    super::require_file(&s.encoder, "encoder")?;
    super::require_dir(&s.images, "image directory")?;
    super::require_file(&s.prompts, "prompt table")?;
    if let Some(r) = &s.refs {
        super::require_dir(r, "reference directory")?;
    }
    let rows = read_prompt_table(&s.prompts)?;
    let mut m = ctx.manifest("evaluate").config(&s, 0)?;
    m.input(&s.encoder)?;
    m.input(&s.prompts)?;
    for (name, _) in &rows {
        let p = s.images.join(name);
        super::require_file(&p, "generated image")?;
        m.input(&p)?;
        if let Some(r) = &s.refs {
            let p = r.join(name);
            super::require_file(&p, "reference image")?;
            m.input(&p)?;
        }
    }

    let enc = DualEncoder::load(&s.encoder)?;
    let side = enc.config.image_side;
    let load = |p: PathBuf| -> Result<ImageTensor> {
        let im = ImageTensor::load_png(&p)?;
        if im.width() != side || im.height() != side {
            return Err(usage(format!(
                "{} is {}×{}; the encoder takes {side}×{side}",
                p.display(),
                im.width(),
                im.height()
            )));
        }
        Ok(im)
    };
    let images = rows
        .iter()
        .map(|(n, _)| Ok((n.clone(), load(s.images.join(n))?)))
        .collect::<Result<Vec<_>>>()?;
    let refs = match &s.refs {
        Some(r) => Some(rows.iter().map(|(n, _)| load(r.join(n))).collect::<Result<Vec<_>>>()?),
        None => None,
    };
    let prompts: Vec<String> = rows.iter().map(|r| r.1.clone()).collect();
    m.output(&s.out);
    m.write(&beside(&s.out))?;

    let report = score(&enc, &images, &prompts, refs.as_deref())?;
    report.save(&s.out)?;
    println!(
        "{} pairs, mean text-image cosine {:.4}",
        report.records.len(),
        report.aggregate.text_image_cos.mean
    );
    Ok(())
}
