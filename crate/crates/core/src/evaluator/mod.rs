//! Contrastive text/image dual encoder used to score generations by cosine
//! similarity.

mod file;

pub use file::{EVALUATOR_MAGIC, EVALUATOR_VERSION};

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Example;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::networks::{Conv2d, Linear, TextConfig, TextEncoder, Vocab};
use crate::numerics::{AdamConfig, AdamState, ParamId, ParamStore, Real, Tape, Var};
use crate::trainer::{batch_indices, stack};

/// Embeddings whose norm is further than this from 1 are rejected.
pub const UNIT_TOLERANCE: f64 = 1e-6;
/// Upper bound on the learned inverse temperature.
pub const MAX_LOGIT_SCALE: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_side: usize,
    /// Conv widths; every level is conv, SiLU, then a 2×2 average pool.
    pub channels: Vec<usize>,
    pub d_emb: usize,
    pub text: TextConfig,
    pub temperature_init: f64,
}

impl EncoderConfig {
    /// 32×32 images through widths (8, 16, 32), a 2-layer 32-wide text
    /// transformer over 40 tokens, 32-dim embeddings.
    pub fn desk(vocab_size: usize) -> Self {
        EncoderConfig {
            image_side: 32,
            channels: vec![8, 16, 32],
            d_emb: 32,
            text: TextConfig {
                vocab_size,
                d_model: 32,
                context_len: 40,
                layers: 2,
                ff_mult: 2,
            },
            temperature_init: 0.07,
        }
    }

    /// S=8 miniature for gradient checks.
    pub fn tiny(vocab_size: usize) -> Self {
        EncoderConfig {
            image_side: 8,
            channels: vec![2, 3],
            d_emb: 4,
            text: TextConfig {
                vocab_size,
                d_model: 4,
                context_len: 6,
                layers: 1,
                ff_mult: 2,
            },
            temperature_init: 0.07,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.channels.len();
        if levels == 0 || self.channels.contains(&0) {
            return Err(Error::Config("image encoder needs at least one nonzero conv width".into()));
        }
        if self.image_side == 0 || !self.image_side.is_multiple_of(1 << levels) {
            return Err(Error::Config(format!(
                "image side {} is not divisible by 2^{levels}",
                self.image_side
            )));
        }
        if self.d_emb == 0 || self.text.d_model == 0 || self.text.layers == 0 {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        if self.text.context_len < 2 {
            return Err(Error::Config("text context must hold <bos> and <eos>".into()));
        }
        if !(self.temperature_init > 0.0 && self.temperature_init.is_finite()) {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature_init)));
        }
        Ok(())
    }

    fn pooled_side(&self) -> usize {
        self.image_side >> self.channels.len()
    }
}

/// Image tower and text tower projecting into a shared unit sphere, plus a
/// learned log inverse temperature.
#[derive(Debug, Clone)]
pub struct DualEncoder<T> {
    pub config: EncoderConfig,
    pub vocab: Vocab,
    pub store: ParamStore<T>,
    convs: Vec<Conv2d>,
    image_proj: Linear,
    text: TextEncoder,
    text_proj: Linear,
    logit_scale: ParamId,
}

impl<T: Real> DualEncoder<T> {
    pub fn new(config: EncoderConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.text.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} tokens, encoder expects {}",
                vocab.len(),
                config.text.vocab_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut convs = Vec::with_capacity(config.channels.len());
        let mut c_in = 3;
        for (i, &c) in config.channels.iter().enumerate() {
            let conv = Conv2d::new(&mut store, &format!("image.conv{i}"), c_in, c, 3, &mut rng)?;
            rescale_to_fan_in(&mut store, conv.weight, 9 * c_in);
            convs.push(conv);
            c_in = c;
        }
        let flat = c_in * config.pooled_side() * config.pooled_side();
        let image_proj = Linear::new(&mut store, "image.proj", flat, config.d_emb, true, &mut rng)?;
        rescale_to_fan_in(&mut store, image_proj.weight, flat);
        let text = TextEncoder::new(&mut store, &config.text, &mut rng)?;
        let text_proj = Linear::new(&mut store, "text.proj", config.text.d_model, config.d_emb, true, &mut rng)?;
        let init = crate::numerics::Tensor::from_f64(&[1], &[(1.0 / config.temperature_init).ln()])?;
        let logit_scale = store.add("logit_scale", init, true)?;
        Ok(DualEncoder {
            config,
            vocab,
            store,
            convs,
            image_proj,
            text,
            text_proj,
            logit_scale,
        })
    }

    pub fn cast<U: Real>(&self) -> DualEncoder<U> {
        DualEncoder {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            store: self.store.cast(),
            convs: self.convs.clone(),
            image_proj: self.image_proj.clone(),
            text: self.text.clone(),
            text_proj: self.text_proj.clone(),
            logit_scale: self.logit_scale,
        }
    }

    pub fn temperature(&self) -> f64 {
        (-self.store.get(self.logit_scale).value.data()[0].as_f64()).exp()
    }

    /// `[B, 3, S, S]` → unit rows `[B, d_emb]`.
    pub fn image_forward(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let side = self.config.image_side;
        if s.len() != 4 || s[1] != 3 || s[2] != side || s[3] != side {
            return Err(Error::dim("image_embed", &s, &[s.first().copied().unwrap_or(0), 3, side, side]));
        }
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(tape, store, h)?;
            h = tape.silu(h);
            h = tape.avg_pool2(h)?;
        }
        let flat = tape.shape(h)[1..].iter().product::<usize>();
        let h = tape.reshape(h, &[s[0], flat])?;
        let e = self.image_proj.forward(tape, store, h)?;
        tape.l2_normalize_rows(e)
    }

    /// Token ids → unit rows `[B, d_emb]`, mean-pooled over positions.
    pub fn text_forward(&self, tape: &mut Tape<T>, store: &ParamStore<T>, ids: &[Vec<usize>]) -> Result<Var> {
        let h = self.text.forward(tape, store, ids)?;
        let pooled = tape.mean_axis(h, 1)?;
        let e = self.text_proj.forward(tape, store, pooled)?;
        tape.l2_normalize_rows(e)
    }

    pub fn tokenize(&self, prompts: &[&str]) -> Vec<Vec<usize>> {
        prompts
            .iter()
            .map(|p| self.vocab.tokenize(p, self.config.text.context_len))
            .collect()
    }

    /// Symmetric in-batch cross-entropy; row `i` of both towers is the
    /// matching pair.
    pub fn contrastive_loss(&self, tape: &mut Tape<T>, store: &ParamStore<T>, images: Var, ids: &[Vec<usize>]) -> Result<Var> {
        let b = ids.len();
        let zi = self.image_forward(tape, store, images)?;
        let zt = self.text_forward(tape, store, ids)?;
        let sim = tape.matmul_nt(zi, zt)?;
        let s = tape.param(store, self.logit_scale);
        let inv_temp = tape.exp(s);
        let logits = tape.mul_scalar_var(sim, inv_temp)?;
        contrastive_from_logits(tape, logits, b)
    }

    pub fn encode_images(&self, images: &[ImageTensor]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            if let Some(bad) = chunk.iter().find(|im| im.height() != self.config.image_side || im.width() != self.config.image_side) {
                return Err(Error::dim(
                    "image_embed",
                    &[bad.height(), bad.width()],
                    &[self.config.image_side, self.config.image_side],
                ));
            }
            let (shape, data) = stack(chunk);
            let mut tape = Tape::new();
            let x = tape.constant(&shape, data.into_iter().map(|v| T::lit(v as f64)).collect())?;
            let e = self.image_forward(&mut tape, &self.store, x)?;
            out.extend(unit_rows(tape.value(e), self.config.d_emb)?);
        }
        Ok(out)
    }

    pub fn encode_texts(&self, prompts: &[&str]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(prompts.len());
        for chunk in prompts.chunks(32) {
            let mut tape = Tape::new();
            let e = self.text_forward(&mut tape, &self.store, &self.tokenize(chunk))?;
            out.extend(unit_rows(tape.value(e), self.config.d_emb)?);
        }
        Ok(out)
    }
}

impl DualEncoder<f32> {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, file::to_bytes(self)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        file::from_bytes(&bytes)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        file::to_bytes(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        file::from_bytes(bytes)
    }
}

/// The image tower has no normalization layers, so its weights start at
/// std `1/sqrt(fan_in)` instead of the default 0.02 to keep activations from
/// shrinking level by level.
fn rescale_to_fan_in<T: Real>(store: &mut ParamStore<T>, id: ParamId, fan_in: usize) {
    let k = T::lit(1.0 / (0.02 * (fan_in as f64).sqrt()));
    for v in store.get_mut(id).value.data_mut() {
        *v *= k;
    }
}

/// `(CE(logits, diag) + CE(logitsᵀ, diag)) / 2` over a `[b, b]` node.
pub fn contrastive_from_logits<T: Real>(tape: &mut Tape<T>, logits: Var, b: usize) -> Result<Var> {
    let targets: Vec<usize> = (0..b).collect();
    let i2t = tape.cross_entropy(logits, &targets)?;
    let lt = tape.transpose(logits)?;
    let t2i = tape.cross_entropy(lt, &targets)?;
    let sum = tape.add(i2t, t2i)?;
    Ok(tape.scale(sum, 0.5))
}

/// Widens to 64-bit and renormalizes, so downstream dot products see norms
/// of 1 to double precision.
fn unit_rows<T: Real>(data: &[T], d: usize) -> Result<Vec<Vec<f64>>> {
    data.chunks(d)
        .map(|row| {
            let v: Vec<f64> = row.iter().map(|x| x.as_f64()).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::NonFinite("embedding with zero norm".into()));
            }
            Ok(v.into_iter().map(|x| x / n).collect())
        })
        .collect()
}

fn check_unit(v: &[f64]) -> Result<()> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (n - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::NotUnit(n));
    }
    Ok(())
}

/// Dot product of two unit vectors, clamped to `[-1, 1]`.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::dim("cosine_similarity", &[u.len()], &[v.len()]));
    }
    check_unit(u)?;
    check_unit(v)?;
    if u == v {
        return Ok(1.0);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok(dot.clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            steps: 1000,
            batch_size: 32,
            lr: 2e-3,
            seed: 0,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size < 2 {
            return Err(Error::Config("contrastive training needs steps ≥ 1 and batch ≥ 2".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ContrastiveOutcome {
    pub encoder: DualEncoder<f32>,
    /// `(step, loss)` for every step that trained, 1-based.
    pub losses: Vec<(u64, f32)>,
    /// Steps whose batch held fewer than two distinct captions.
    pub skipped: Vec<u64>,
}

/// Trains a fresh encoder on `examples`. The vocabulary is built from their
/// captions and `config.text.vocab_size` is set to match it.
///
/// Repeated captions inside a batch keep only their first pair, since the
/// in-batch softmax would otherwise treat a true match as a negative.
pub fn contrastive_train(examples: &[Example], mut config: EncoderConfig, cfg: &ContrastiveConfig) -> Result<ContrastiveOutcome> {
    cfg.validate()?;
    let captions: Vec<&str> = examples.iter().map(|e| e.record.caption.as_str()).collect();
    if captions.iter().collect::<BTreeSet<_>>().len() < 2 {
        return Err(Error::Config("contrastive training needs at least two distinct captions".into()));
    }
    let vocab = Vocab::build(captions.iter().copied());
    config.text.vocab_size = vocab.len();
    let mut enc = DualEncoder::<f32>::new(config, vocab, cfg.seed)?;
    let ids = enc.tokenize(&captions);
    let mut adam = AdamState::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut skipped = Vec::new();
    for step in 0..cfg.steps as u64 {
        let mut seen = BTreeSet::new();
        let idx: Vec<usize> = batch_indices(cfg.seed, examples.len(), cfg.batch_size, step)
            .into_iter()
            .filter(|&i| seen.insert(captions[i]))
            .collect();
        if idx.len() < 2 {
            skipped.push(step + 1);
            continue;
        }
        let batch: Vec<ImageTensor> = idx.iter().map(|&i| examples[i].image.clone()).collect();
        let (shape, data) = stack(&batch);
        let mut tape = Tape::new();
        let x = tape.constant(&shape, data)?;
        let batch_ids: Vec<Vec<usize>> = idx.iter().map(|&i| ids[i].clone()).collect();
        let loss = enc.contrastive_loss(&mut tape, &enc.store, x, &batch_ids)?;
        let value = tape.value(loss)[0];
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("contrastive loss at step {}", step + 1)));
        }
        let grads = tape.backward(loss)?;
        tape.write_param_grads(&grads, &mut enc.store);
        adam.step(&mut enc.store)?;
        enc.store.zero_grads();
        let s = &mut enc.store.get_mut(enc.logit_scale).value.data_mut()[0];
        *s = s.clamp(0.0, MAX_LOGIT_SCALE.ln() as f32);
        losses.push((step + 1, value));
    }
    Ok(ContrastiveOutcome {
        encoder: enc,
        losses,
        skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub trials: usize,
    pub hits: usize,
    pub distractors: usize,
    pub accuracy: f64,
}

/// Top-1 caption retrieval: each image must score its own caption strictly
/// above `distractors` other distinct captions drawn from the same set.
pub fn retrieval_accuracy(enc: &DualEncoder<f32>, examples: &[Example], distractors: usize, seed: u64) -> Result<RetrievalReport> {
    let unique: Vec<&str> = examples
        .iter()
        .map(|e| e.record.caption.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if unique.len() <= distractors {
        return Err(Error::Config(format!(
            "{} distinct captions cannot supply {distractors} distractors",
            unique.len()
        )));
    }
    let images: Vec<ImageTensor> = examples.iter().map(|e| e.image.clone()).collect();
    let img = enc.encode_images(&images)?;
    let txt = enc.encode_texts(&unique)?;
    let mut hits = 0;
    for (i, ex) in examples.iter().enumerate() {
        let own = unique.binary_search(&ex.record.caption.as_str()).expect("collected above");
        let mut pool: Vec<usize> = (0..unique.len()).filter(|&j| j != own).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        pool.shuffle(&mut rng);
        let target = cosine_similarity(&img[i], &txt[own])?;
        let mut best_other = f64::NEG_INFINITY;
        for &j in &pool[..distractors] {
            best_other = best_other.max(cosine_similarity(&img[i], &txt[j])?);
        }
        if target > best_other {
            hits += 1;
        }
    }
    Ok(RetrievalReport {
        trials: examples.len(),
        hits,
        distractors,
        accuracy: hits as f64 / examples.len() as f64,
    })
}

/// Seeded permutation of `0..n` without fixed points (Sattolo's cycle).
pub fn derangement(n: usize, seed: u64) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::Config(format!("no derangement of {n} items")));
    }
    let mut p: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.random_range(0..i);
        p.swap(i, j);
    }
    Ok(p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShuffleControl {
    pub matched_mean: f64,
    pub deranged_mean: f64,
    pub derangement: Vec<usize>,
}

/// Mean text/image cosine over true pairs and over a seeded derangement of
/// the captions.
pub fn shuffle_control(enc: &DualEncoder<f32>, examples: &[Example], seed: u64) -> Result<ShuffleControl> {
    let perm = derangement(examples.len(), seed)?;
    let images: Vec<ImageTensor> = examples.iter().map(|e| e.image.clone()).collect();
    let captions: Vec<&str> = examples.iter().map(|e| e.record.caption.as_str()).collect();
    let img = enc.encode_images(&images)?;
    let txt = enc.encode_texts(&captions)?;
    let n = examples.len() as f64;
    let mut matched = 0.0;
    let mut deranged = 0.0;
    for i in 0..examples.len() {
        matched += cosine_similarity(&img[i], &txt[i])?;
        deranged += cosine_similarity(&img[i], &txt[perm[i]])?;
    }
    Ok(ShuffleControl {
        matched_mean: matched / n,
        deranged_mean: deranged / n,
        derangement: perm,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub prompt: String,
    pub image: String,
    pub text_image_cos: f64,
    pub image_image_cos: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Stats {
    fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        Some(Stats {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub text_image_cos: Stats,
    pub image_image_cos: Option<Stats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub records: Vec<PairRecord>,
    pub aggregate: Aggregate,
}

impl SimilarityReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// One generated image per prompt, named by `images[i].0`; `refs`, when
/// given, pairs each generation with a real image.
pub fn evaluate(
    enc: &DualEncoder<f32>,
    images: &[(String, ImageTensor)],
    prompts: &[String],
    refs: Option<&[ImageTensor]>,
) -> Result<SimilarityReport> {
    if images.len() != prompts.len() {
        return Err(Error::Arity(format!("{} images but {} prompts", images.len(), prompts.len())));
    }
    if let Some(r) = refs {
        if r.len() != images.len() {
            return Err(Error::Arity(format!("{} images but {} references", images.len(), r.len())));
        }
    }
    if images.is_empty() {
        return Err(Error::Arity("nothing to evaluate".into()));
    }
    let gen: Vec<ImageTensor> = images.iter().map(|(_, im)| im.clone()).collect();
    let g = enc.encode_images(&gen)?;
    let p: Vec<&str> = prompts.iter().map(String::as_str).collect();
    let t = enc.encode_texts(&p)?;
    let r = refs.map(|r| enc.encode_images(r)).transpose()?;
    let mut records = Vec::with_capacity(images.len());
    for i in 0..images.len() {
        records.push(PairRecord {
            prompt: prompts[i].clone(),
            image: images[i].0.clone(),
            text_image_cos: cosine_similarity(&t[i], &g[i])?,
            image_image_cos: r.as_ref().map(|r| cosine_similarity(&g[i], &r[i])).transpose()?,
        });
    }
    let ti: Vec<f64> = records.iter().map(|r| r.text_image_cos).collect();
    let ii: Vec<f64> = records.iter().filter_map(|r| r.image_image_cos).collect();
    Ok(SimilarityReport {
        aggregate: Aggregate {
            count: records.len(),
            text_image_cos: Stats::of(&ti).expect("nonempty"),
            image_image_cos: Stats::of(&ii),
        },
        records,
    })
}
