//! Staged training (VAE, then diffusion, then adapter fine-tuning) with a
//! loss log, periodic checkpoints and preview grids.

mod checkpoint;
mod log;

pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use log::{read_loss_log, LossLog, LossRecord, LOSS_LOG_FILE};

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Example;
use crate::diffusion::{diffusion_loss, NoiseSchedule, Pipeline, SampleOptions, SamplerKind};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::lora::{inject, save_adapters, FreezeSnapshot, LoraConfig};
use crate::networks::{kl_divergence, Model, ModelConfig, Vocab};
use crate::numerics::{AdamConfig, AdamState, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Vae,
    Diffusion,
    #[serde(alias = "lora_finetune")]
    Lora,
}

impl Stage {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vae" => Ok(Stage::Vae),
            "diffusion" => Ok(Stage::Diffusion),
            "lora" | "lora_finetune" => Ok(Stage::Lora),
            _ => Err(Error::Config(format!("unknown stage `{s}` (vae, diffusion, lora)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Vae => "vae",
            Stage::Diffusion => "diffusion",
            Stage::Lora => "lora",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub total_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub checkpoint_every: usize,
    pub preview_count: usize,
    pub preview_prompt: String,
    /// Sampler steps used for diffusion previews.
    pub preview_steps: usize,
    pub seed: u64,
    /// Weight of the KL term in the VAE stage.
    pub kl_weight: f64,
    /// Diffuse posterior samples instead of posterior means. Off by default:
    /// on the toy corpus most latent channels collapse to the prior, and
    /// their samples are noise the decoder ignores.
    pub latent_sampling: bool,
    /// Adapter placement; required for the lora stage.
    pub lora: Option<LoraConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Vae,
            total_steps: 2000,
            batch_size: 8,
            lr: 1e-3,
            checkpoint_every: 500,
            preview_count: 4,
            preview_prompt: "a garden scene with a pavilion on the left".into(),
            preview_steps: 20,
            seed: 0,
            kl_weight: 1e-3,
            latent_sampling: false,
            lora: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.total_steps == 0 {
            return fail("total_steps must be positive".into());
        }
        if self.checkpoint_every == 0 || self.checkpoint_every > self.total_steps {
            return fail(format!(
                "checkpoint_every {} must lie in 1..={}",
                self.checkpoint_every, self.total_steps
            ));
        }
        if self.batch_size == 0 || self.preview_count == 0 {
            return fail("batch_size and preview_count must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.kl_weight >= 0.0) {
            return fail(format!("bad lr {} or kl_weight {}", self.lr, self.kl_weight));
        }
        if self.stage != Stage::Vae && self.preview_steps < 4 {
            return fail("preview_steps must be at least 4 for PNDM previews".into());
        }
        if self.stage == Stage::Lora && self.lora.is_none() {
            return fail("the lora stage needs an adapter configuration (`lora`)".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// Images with captions and the vocabulary the text encoder was sized for.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub images: Vec<ImageTensor>,
    pub captions: Vec<String>,
    pub vocab: Vocab,
}

impl TrainData {
    pub fn new(examples: &[Example], vocab: Vocab) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        Ok(TrainData {
            images: examples.iter().map(|e| e.image.clone()).collect(),
            captions: examples.iter().map(|e| e.record.caption.clone()).collect(),
            vocab,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Where a run starts from.
pub enum Start {
    /// Fresh weights; only valid for the VAE stage.
    Fresh { config: ModelConfig, init_seed: u64 },
    /// Weights of a finished earlier stage; optimizer and step restart.
    Init(Box<Checkpoint>),
    /// Continue a run of the same stage.
    Resume(Box<Checkpoint>),
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: Checkpoint,
    pub checkpoints: Vec<PathBuf>,
    pub previews: Vec<PathBuf>,
    pub adapters: Vec<PathBuf>,
    /// Losses of the steps run in this call.
    pub losses: Vec<f32>,
}

pub fn checkpoint_name(step: u64) -> String {
    format!("step{step}.ckpt")
}

pub fn preview_name(step: u64) -> String {
    format!("preview_step{step}.png")
}

pub fn adapter_name(step: u64) -> String {
    format!("adapters_step{step}.lora")
}

/// Batch of dataset indices for `step` (0-based): consecutive slices of
/// per-epoch seeded permutations.
pub fn batch_indices(seed: u64, n: usize, batch: usize, step: u64) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut pos = step as usize * batch;
    let mut cached: Option<(usize, Vec<usize>)> = None;
    while out.len() < batch {
        let epoch = pos / n;
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(epoch as u64 + 1);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().expect("filled above").1[pos % n]);
        pos += 1;
    }
    out
}

/// Inverse standard deviation of the VAE posterior means over `images`.
pub fn estimate_latent_scale(model: &Model<f32>, images: &[ImageTensor]) -> Result<f32> {
    let mut sum = 0.0f64;
    let mut sq = 0.0f64;
    let mut n = 0usize;
    for chunk in images.chunks(16) {
        let (mean, _) = encode_batch(model, chunk)?;
        for &v in mean.data() {
            sum += v as f64;
            sq += (v as f64) * (v as f64);
            n += 1;
        }
    }
    let m = sum / n as f64;
    let var = (sq / n as f64 - m * m).max(1e-12);
    Ok((1.0 / var.sqrt()) as f32)
}

pub(crate) fn stack(images: &[ImageTensor]) -> (Vec<usize>, Vec<f32>) {
    let (h, w) = (images[0].height(), images[0].width());
    let data = images.iter().flat_map(|im| im.data().iter().copied()).collect();
    (vec![images.len(), 3, h, w], data)
}

fn encode_batch(model: &Model<f32>, images: &[ImageTensor]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let (shape, data) = stack(images);
    let mut tape = Tape::new();
    let x = tape.constant(&shape, data)?;
    let (mean, logvar) = model.vae.encode(&mut tape, &model.store, x)?;
    Ok((tape.to_tensor(mean), tape.to_tensor(logvar)))
}

/// Mean-latent reconstructions.
pub fn reconstruct(model: &Model<f32>, images: &[ImageTensor]) -> Result<Vec<ImageTensor>> {
    let (shape, data) = stack(images);
    let mut tape = Tape::new();
    let x = tape.constant(&shape, data)?;
    let (mean, _) = model.vae.encode(&mut tape, &model.store, x)?;
    let y = model.vae.decode(&mut tape, &model.store, mean)?;
    let (h, w) = (shape[2], shape[3]);
    tape.value(y)
        .chunks(3 * h * w)
        .map(|c| ImageTensor::new(h, w, c.to_vec()))
        .collect()
}

struct Run<'a> {
    cfg: &'a TrainConfig,
    data: &'a TrainData,
    out: &'a Path,
    sched: Option<NoiseSchedule>,
    /// Posterior mean and logvar per image, for the latent stages.
    posteriors: Vec<(Vec<f32>, Vec<f32>)>,
    ids: Vec<Vec<usize>>,
    freeze: Option<FreezeSnapshot>,
}

impl Run<'_> {
    fn vae_loss(&self, tape: &mut Tape<f32>, state: &Checkpoint, idx: &[usize], rng: &mut ChaCha8Rng) -> Result<crate::numerics::Var> {
        let m = &state.model;
        let batch: Vec<ImageTensor> = idx.iter().map(|&i| self.data.images[i].clone()).collect();
        let (shape, data) = stack(&batch);
        let x = tape.constant(&shape, data)?;
        let (mean, logvar) = m.vae.encode(tape, &m.store, x)?;
        let noise = Tensor::<f32>::randn(tape.shape(mean), 1.0, rng);
        let nv = tape.input(&noise);
        let z = m.vae.sample(tape, mean, logvar, nv)?;
        let recon = m.vae.decode(tape, &m.store, z)?;
        let rec = tape.mse(recon, x)?;
        let kl = kl_divergence(tape, mean, logvar)?;
        let kl = tape.scale(kl, self.cfg.kl_weight);
        let loss = tape.add(rec, kl)?;
        if !tape.value(loss)[0].is_finite() {
            return Err(Error::NonFinite(format!("vae loss on images {idx:?}")));
        }
        Ok(loss)
    }

    fn diffusion_loss(
        &self,
        tape: &mut Tape<f32>,
        state: &Checkpoint,
        idx: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<crate::numerics::Var> {
        let m = &state.model;
        let scale = state.latent_scale.expect("checked at start");
        let sched = self.sched.as_ref().expect("latent stage");
        let [c, h, w] = m.config.latent_shape();
        let per = c * h * w;
        let mut z0 = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            let (mean, logvar) = &self.posteriors[i];
            if self.cfg.latent_sampling {
                for (&mu, &lv) in mean.iter().zip(logvar) {
                    let n: f32 = rng.sample(rand_distr::StandardNormal);
                    z0.push((mu + (0.5 * lv).exp() * n) * scale);
                }
            } else {
                z0.extend(mean.iter().map(|&mu| mu * scale));
            }
        }
        let t: Vec<usize> = idx.iter().map(|_| rng.random_range(1..=sched.t_max())).collect();
        let eps = Tensor::<f32>::randn(&[idx.len(), c, h, w], 1.0, rng);
        let ids: Vec<Vec<usize>> = idx.iter().map(|&i| self.ids[i].clone()).collect();
        let z0 = Tensor::new(&[idx.len(), c, h, w], z0)?;
        diffusion_loss(tape, m, sched, &z0, &t, &eps, &ids).map_err(|e| match e {
            Error::NonFinite(_) => Error::NonFinite(format!("diffusion loss at timesteps {t:?}, prompts {idx:?}")),
            other => other,
        })
    }

    fn step(&self, state: &mut Checkpoint, rng: &mut ChaCha8Rng) -> Result<f32> {
        let idx = batch_indices(self.cfg.seed, self.data.len(), self.cfg.batch_size, state.step);
        let mut tape = Tape::new();
        let loss = match self.cfg.stage {
            Stage::Vae => self.vae_loss(&mut tape, state, &idx, rng)?,
            Stage::Diffusion | Stage::Lora => self.diffusion_loss(&mut tape, state, &idx, rng)?,
        };
        let value = tape.value(loss)[0];
        let grads = tape.backward(loss)?;
        tape.write_param_grads(&grads, &mut state.model.store);
        state.adam.step(&mut state.model.store)?;
        state.model.store.zero_grads();
        Ok(value)
    }

    fn preview(&self, state: &Checkpoint) -> Result<ImageTensor> {
        let k = self.cfg.preview_count;
        let images = match self.cfg.stage {
            Stage::Vae => {
                let picks: Vec<ImageTensor> = (0..k).map(|i| self.data.images[i % self.data.len()].clone()).collect();
                reconstruct(&state.model, &picks)?
            }
            Stage::Diffusion | Stage::Lora => {
                let sched = self.sched.as_ref().expect("latent stage");
                let scale = state.latent_scale.expect("checked at start");
                let pipe = Pipeline::new(&state.model, &self.data.vocab, sched, scale)?;
                let prompts = vec![self.cfg.preview_prompt.as_str(); k];
                pipe.sample(
                    &prompts,
                    &SampleOptions {
                        steps: self.cfg.preview_steps,
                        seed: self.cfg.seed ^ state.step,
                        sampler: SamplerKind::Pndm,
                        guidance_scale: 1.0,
                    },
                )?
            }
        };
        ImageTensor::tile_horizontal(&images)
    }
}

fn prepare_state(cfg: &TrainConfig, data: &TrainData, start: Start) -> Result<(Checkpoint, ChaCha8Rng)> {
    let vocab_hash = data.vocab.hash();
    let fresh_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    match start {
        Start::Resume(ck) => {
            let ck = *ck;
            if ck.stage != cfg.stage {
                return Err(Error::State(format!(
                    "cannot resume a {} checkpoint as stage {}",
                    ck.stage.as_str(),
                    cfg.stage.as_str()
                )));
            }
            if ck.step > cfg.total_steps as u64 {
                return Err(Error::State(format!(
                    "checkpoint is at step {}, past total_steps {}",
                    ck.step, cfg.total_steps
                )));
            }
            let rng = ck.rng.restore()?;
            Ok((ck, rng))
        }
        Start::Fresh { config, init_seed } => {
            if cfg.stage != Stage::Vae {
                return Err(Error::State(format!(
                    "stage {} needs a checkpoint from the previous stage",
                    cfg.stage.as_str()
                )));
            }
            if config.text.vocab_size != data.vocab.len() {
                return Err(Error::Config(format!(
                    "model vocabulary {} differs from data vocabulary {}",
                    config.text.vocab_size,
                    data.vocab.len()
                )));
            }
            let mut model = Model::<f32>::new(config, init_seed)?;
            model.store.set_trainable_all(false);
            model.store.set_trainable_prefix("vae.", true);
            Ok((
                Checkpoint {
                    stage: cfg.stage,
                    step: 0,
                    model,
                    adam: AdamState::new(cfg.adam()),
                    latent_scale: None,
                    vocab_hash,
                    rng: RngState::capture(&fresh_rng),
                    train_config: cfg.clone(),
                },
                fresh_rng,
            ))
        }
        Start::Init(ck) => {
            let ck = *ck;
            let expected = match cfg.stage {
                Stage::Vae => None,
                Stage::Diffusion => Some(Stage::Vae),
                Stage::Lora => Some(Stage::Diffusion),
            };
            if expected != Some(ck.stage) && !(cfg.stage == Stage::Diffusion && ck.stage == Stage::Diffusion) {
                return Err(Error::State(format!(
                    "stage {} cannot start from a {} checkpoint",
                    cfg.stage.as_str(),
                    ck.stage.as_str()
                )));
            }
            if ck.vocab_hash != vocab_hash {
                return Err(Error::State("checkpoint vocabulary differs from the data vocabulary".into()));
            }
            let mut model = ck.model;
            let mut rng = fresh_rng;
            match cfg.stage {
                Stage::Diffusion => {
                    model.store.set_trainable_all(false);
                    model.store.set_trainable_prefix("text.", true);
                    model.store.set_trainable_prefix("unet.", true);
                }
                Stage::Lora => {
                    let lc = cfg.lora.as_ref().expect("validated");
                    inject(&mut model.store, lc, &mut rng)?;
                }
                Stage::Vae => unreachable!("rejected above"),
            }
            Ok((
                Checkpoint {
                    stage: cfg.stage,
                    step: 0,
                    model,
                    adam: AdamState::new(cfg.adam()),
                    latent_scale: ck.latent_scale,
                    vocab_hash,
                    rng: RngState::capture(&rng),
                    train_config: cfg.clone(),
                },
                rng,
            ))
        }
    }
}

/// Runs `cfg.total_steps` optimizer steps (minus those already in a resumed
/// checkpoint), writing `loss.csv`, checkpoints, previews and, for the
/// adapter stage, standalone adapter files into `out`.
///
/// A non-finite loss or gradient writes `crash_step{N}.ckpt` with the state
/// before the failing step and returns the error.
pub fn train(cfg: &TrainConfig, data: &TrainData, start: Start, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let resuming = matches!(start, Start::Resume(_));
    let (mut state, mut rng) = prepare_state(cfg, data, start)?;
    let model_side = state.model.config.image_side;
    if data.images.iter().any(|im| im.height() != model_side || im.width() != model_side) {
        return Err(Error::Config(format!("training images must be {model_side}×{model_side}")));
    }
    if cfg.stage != Stage::Vae && state.latent_scale.is_none() {
        return Err(Error::State("checkpoint has no latent scale; finish the vae stage first".into()));
    }
    state.train_config = cfg.clone();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let mut run = Run {
        cfg,
        data,
        out,
        sched: None,
        posteriors: Vec::new(),
        ids: Vec::new(),
        freeze: None,
    };
    if cfg.stage != Stage::Vae {
        run.sched = Some(state.model.config.noise_schedule()?);
        for chunk in data.images.chunks(16) {
            let (mean, logvar) = encode_batch(&state.model, chunk)?;
            let per = mean.numel() / chunk.len();
            for i in 0..chunk.len() {
                run.posteriors.push((
                    mean.data()[i * per..(i + 1) * per].to_vec(),
                    logvar.data()[i * per..(i + 1) * per].to_vec(),
                ));
            }
        }
        let l = state.model.config.text.context_len;
        run.ids = data.captions.iter().map(|c| data.vocab.tokenize(c, l)).collect();
    }
    if cfg.stage == Stage::Lora {
        if state.model.store.lora_bindings().next().is_none() {
            return Err(Error::State("lora stage without injected adapters".into()));
        }
        run.freeze = Some(FreezeSnapshot::capture(&state.model.store));
    }

    let mut log = LossLog::open(&out.join(LOSS_LOG_FILE), if resuming { Some(state.step) } else { None })?;
    let mut outcome = TrainOutcome {
        state: state.clone(),
        checkpoints: Vec::new(),
        previews: Vec::new(),
        adapters: Vec::new(),
        losses: Vec::new(),
    };
    while (state.step as usize) < cfg.total_steps {
        // Failing steps leave the parameters and moments untouched; only
        // the rng has moved.
        let rng_before = rng.clone();
        let started = Instant::now();
        let loss = match run.step(&mut state, &mut rng) {
            Ok(l) => l,
            Err(e @ Error::NonFinite(_)) => {
                state.model.store.zero_grads();
                state.rng = RngState::capture(&rng_before);
                let path = out.join(format!("crash_step{}.ckpt", state.step));
                state.save(&path)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        state.step += 1;
        log.append(LossRecord {
            step: state.step,
            loss,
            wall_ms: started.elapsed().as_millis() as u64,
        })?;
        outcome.losses.push(loss);

        if (state.step as usize).is_multiple_of(cfg.checkpoint_every) {
            if cfg.stage == Stage::Vae {
                state.latent_scale = Some(estimate_latent_scale(&state.model, &data.images)?);
            }
            if let Some(f) = &run.freeze {
                f.verify(&state.model.store)?;
            }
            state.rng = RngState::capture(&rng);
            let path = run.out.join(checkpoint_name(state.step));
            state.save(&path)?;
            outcome.checkpoints.push(path);
            let grid = run.preview(&state)?;
            let ppath = run.out.join(preview_name(state.step));
            grid.save_png(&ppath)?;
            outcome.previews.push(ppath);
            if cfg.stage == Stage::Lora {
                let apath = run.out.join(adapter_name(state.step));
                save_adapters(&apath, &state.model.store)?;
                outcome.adapters.push(apath);
            }
        }
    }
    if cfg.stage == Stage::Vae && state.latent_scale.is_none() {
        state.latent_scale = Some(estimate_latent_scale(&state.model, &data.images)?);
    }
    state.rng = RngState::capture(&rng);
    outcome.state = state;
    Ok(outcome)
}

#[cfg(test)]
mod tests;
