use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use clap::ValueEnum;
use garden_core::diffusion::{InpaintTask, Pipeline, SampleOptions, SamplerKind, PNDM_WARMUP};
use garden_core::image::{read_png_rgb8, ImageTensor};
use garden_core::lora::load_adapters;
use garden_core::networks::{Model, Vocab};
use garden_core::trainer::Checkpoint;
use serde::Serialize;

use super::data::VOCAB_FILE;
use crate::manifest::{beside, RunManifest};
use crate::{usage, Ctx};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerArg {
    Ddpm,
    Pndm,
}

impl From<SamplerArg> for SamplerKind {
    fn from(s: SamplerArg) -> SamplerKind {
        match s {
            SamplerArg::Ddpm => SamplerKind::Ddpm,
            SamplerArg::Pndm => SamplerKind::Pndm,
        }
    }
}

/// Model selection and sampler settings shared by every generating command.
#[derive(clap::Args, Debug, Clone, Serialize)]
pub struct ModelArgs {
    /// Diffusion-stage checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Adapter file to attach before sampling.
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    /// Vocabulary file; defaults to `vocab.txt` beside the checkpoint.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 25)]
    pub steps: usize,
    #[arg(long, value_enum, default_value_t = SamplerArg::Pndm)]
    pub sampler: SamplerArg,
    /// Classifier-free guidance weight; 1 disables guidance.
    #[arg(long, default_value_t = 1.0)]
    pub guidance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl ModelArgs {
    pub fn absolute(&self, ctx: &Ctx) -> ModelArgs {
        let ckpt = ctx.path(&self.ckpt);
        let vocab = match &self.vocab {
            Some(v) => ctx.path(v),
            None => ckpt.parent().unwrap_or(Path::new(".")).join(VOCAB_FILE),
        };
        ModelArgs {
            ckpt,
            adapter: self.adapter.as_ref().map(|p| ctx.path(p)),
            vocab: Some(vocab),
            ..self.clone()
        }
    }

    pub fn options(&self) -> SampleOptions {
        SampleOptions {
            steps: self.steps,
            seed: self.seed,
            sampler: self.sampler.into(),
            guidance_scale: self.guidance,
        }
    }

    /// Checks flags and input files; expects `absolute` to have run.
    pub fn validate(&self) -> Result<()> {
        super::require_file(&self.ckpt, "checkpoint")?;
        if let Some(a) = &self.adapter {
            super::require_file(a, "adapter file")?;
        }
        super::require_file(self.vocab.as_ref().expect("resolved"), "vocabulary")?;
        if self.steps == 0 {
            return Err(usage("--steps must be positive"));
        }
        if self.sampler == SamplerArg::Pndm && self.steps <= PNDM_WARMUP {
            return Err(usage(format!("the pndm sampler needs at least {} steps", PNDM_WARMUP + 1)));
        }
        if !(self.guidance >= 1.0 && self.guidance.is_finite()) {
            return Err(usage(format!("--guidance {} must be at least 1", self.guidance)));
        }
        Ok(())
    }

    pub fn record_inputs(&self, m: &mut RunManifest) -> Result<()> {
        m.input(&self.ckpt)?;
        m.input(self.vocab.as_ref().expect("resolved"))?;
        if let Some(a) = &self.adapter {
            m.input(a)?;
        }
        Ok(())
    }

    pub fn load(&self) -> Result<Loaded> {
        let ck = Checkpoint::load(&self.ckpt)?;
        let vocab = Vocab::load(self.vocab.as_ref().expect("resolved"))?;
        if vocab.hash() != ck.vocab_hash {
            bail!("vocabulary does not match the one the checkpoint was trained with");
        }
        let Some(latent_scale) = ck.latent_scale else {
            bail!("checkpoint has no latent scale; train the vae stage first");
        };
        if self.steps > ck.model.config.timesteps {
            return Err(usage(format!(
                "--steps {} exceeds the model's {} timesteps",
                self.steps, ck.model.config.timesteps
            )));
        }
        let mut model = ck.model;
        if let Some(a) = &self.adapter {
            load_adapters(a, &mut model.store)?;
        }
        Ok(Loaded {
            model,
            vocab,
            latent_scale,
        })
    }
}

pub struct Loaded {
    pub model: Model<f32>,
    pub vocab: Vocab,
    pub latent_scale: f32,
}

impl Loaded {
    pub fn side(&self) -> usize {
        self.model.config.image_side
    }

    pub fn with_pipeline<R>(&self, f: impl FnOnce(&Pipeline) -> Result<R>) -> Result<R> {
        let sched = self.model.config.noise_schedule()?;
        let p = Pipeline::new(&self.model, &self.vocab, &sched, self.latent_scale)?;
        f(&p)
    }
}

#[derive(clap::Args, Debug)]
pub struct SampleArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    prompt: String,
    /// Output PNG.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct SampleSettings<'a> {
    #[serde(flatten)]
    model: &'a ModelArgs,
    prompt: &'a str,
    out: &'a Path,
}

pub fn sample(ctx: &Ctx, a: SampleArgs) -> Result<()> {
    let model = a.model.absolute(ctx);
    model.validate()?;
    let out = ctx.path(&a.out);
    let settings = SampleSettings {
        model: &model,
        prompt: &a.prompt,
        out: &out,
    };
    let mut m = ctx.manifest("sample").config(&settings, model.seed)?;
    model.record_inputs(&mut m)?;
    let loaded = model.load()?;
    m.output(&out);
    m.write(&beside(&out))?;

    let img = loaded.with_pipeline(|p| Ok(p.sample(&[&a.prompt], &model.options())?.remove(0)))?;
    img.save_png(&out)?;
    println!("wrote {}", out.display());
    Ok(())
}

#[derive(clap::Args, Debug)]
pub struct InpaintArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    prompt: String,
    /// Source image, at the model's resolution.
    #[arg(long)]
    image: PathBuf,
    /// Mask of the same size; pixels with red ≥ 128 are regenerated.
    #[arg(long)]
    mask: PathBuf,
    /// Output PNG.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct InpaintSettings<'a> {
    #[serde(flatten)]
    model: &'a ModelArgs,
    prompt: &'a str,
    image: &'a Path,
    mask: &'a Path,
    out: &'a Path,
}

/// Reads a mask PNG as one byte per pixel: 1 where the red channel is at
/// least 128.
pub fn read_mask(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let (w, h, rgb) = read_png_rgb8(path)?;
    Ok((w, h, rgb.chunks_exact(3).map(|p| u8::from(p[0] >= 128)).collect()))
}

pub fn inpaint(ctx: &Ctx, a: InpaintArgs) -> Result<()> {
    let model = a.model.absolute(ctx);
    model.validate()?;
    let (image_path, mask_path, out) = (ctx.path(&a.image), ctx.path(&a.mask), ctx.path(&a.out));
    super::require_file(&image_path, "image")?;
    super::require_file(&mask_path, "mask")?;
    let settings = InpaintSettings {
        model: &model,
        prompt: &a.prompt,
        image: &image_path,
        mask: &mask_path,
        out: &out,
    };
    let mut m = ctx.manifest("inpaint").config(&settings, model.seed)?;
    model.record_inputs(&mut m)?;
    m.input(&image_path)?;
    m.input(&mask_path)?;

    let loaded = model.load()?;
    let source = ImageTensor::load_png(&image_path)?;
    let s = loaded.side();
    if source.width() != s || source.height() != s {
        return Err(usage(format!(
            "image is {}×{} but the model works at {s}×{s}",
            source.width(),
            source.height()
        )));
    }
    let (mw, mh, mask) = read_mask(&mask_path)?;
    if (mw, mh) != (s, s) {
        return Err(usage(format!("mask is {mw}×{mh} but the image is {s}×{s}")));
    }
    let task = InpaintTask::new(source, mask, a.prompt.clone()).map_err(|e| usage(e.to_string()))?;
    m.output(&out);
    m.write(&beside(&out))?;

    let img = loaded.with_pipeline(|p| Ok(p.inpaint(&task, &model.options())?))?;
    img.save_png(&out)?;
    println!("wrote {}", out.display());
    Ok(())
}
