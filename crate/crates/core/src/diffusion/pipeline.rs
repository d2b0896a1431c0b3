use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sampler::{ddpm_transition, transitions, PndmState, SamplerKind};
use super::NoiseSchedule;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::networks::{Model, Vocab};
use crate::numerics::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleOptions {
    pub steps: usize,
    pub seed: u64,
    pub sampler: SamplerKind,
    /// Classifier-free guidance weight; 1 disables the unconditional pass.
    pub guidance_scale: f64,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions {
            steps: 25,
            seed: 0,
            sampler: SamplerKind::Pndm,
            guidance_scale: 1.0,
        }
    }
}

/// Region to regenerate in `source`: `mask[y·S + x] = 1` marks pixels to
/// synthesize, 0 pixels to keep.
#[derive(Debug, Clone)]
pub struct InpaintTask {
    pub source: ImageTensor,
    pub mask: Vec<u8>,
    pub prompt: String,
}

impl InpaintTask {
    pub fn new(source: ImageTensor, mask: Vec<u8>, prompt: impl Into<String>) -> Result<Self> {
        let n = source.height() * source.width();
        if mask.len() != n {
            return Err(Error::dim("inpaint mask", &[mask.len()], &[n]));
        }
        if mask.iter().any(|&m| m > 1) {
            return Err(Error::Config("inpaint mask values must be 0 or 1".into()));
        }
        let ones = mask.iter().filter(|&&m| m == 1).count();
        if ones == 0 || ones == n {
            return Err(Error::Config(format!(
                "degenerate inpaint mask: {ones} of {n} pixels marked for regeneration"
            )));
        }
        Ok(InpaintTask {
            source,
            mask,
            prompt: prompt.into(),
        })
    }
}

/// Latent-resolution known map: a cell is known iff a strict majority of
/// its `f×f` pixels have mask 0.
pub fn latent_known_mask(mask: &[u8], side: usize, f: usize) -> Vec<bool> {
    let ls = side / f;
    let mut known = vec![false; ls * ls];
    for ly in 0..ls {
        for lx in 0..ls {
            let mut zeros = 0;
            for y in ly * f..(ly + 1) * f {
                for x in lx * f..(lx + 1) * f {
                    zeros += (mask[y * side + x] == 0) as usize;
                }
            }
            known[ly * ls + lx] = 2 * zeros > f * f;
        }
    }
    known
}

/// Inference over a trained 32-bit model.
pub struct Pipeline<'a> {
    pub model: &'a Model<f32>,
    pub vocab: &'a Vocab,
    pub schedule: &'a NoiseSchedule,
    pub latent_scale: f32,
}

type StepHook<'h> = dyn FnMut(usize, &mut Vec<f32>, &mut ChaCha8Rng) -> Result<()> + 'h;

impl<'a> Pipeline<'a> {
    pub fn new(model: &'a Model<f32>, vocab: &'a Vocab, schedule: &'a NoiseSchedule, latent_scale: f32) -> Result<Self> {
        if !(latent_scale.is_finite() && latent_scale > 0.0) {
            return Err(Error::State("model has no latent scale; train the vae stage first".into()));
        }
        if vocab.len() != model.config.text.vocab_size {
            return Err(Error::State(format!(
                "vocabulary has {} tokens but the model expects {}",
                vocab.len(),
                model.config.text.vocab_size
            )));
        }
        if schedule.t_max() != model.config.timesteps {
            return Err(Error::Config(format!(
                "schedule T = {} differs from model T = {}",
                schedule.t_max(),
                model.config.timesteps
            )));
        }
        Ok(Pipeline {
            model,
            vocab,
            schedule,
            latent_scale,
        })
    }

    pub fn encode_prompts(&self, prompts: &[&str]) -> Result<Tensor<f32>> {
        let l = self.model.config.text.context_len;
        let ids: Vec<Vec<usize>> = prompts.iter().map(|p| self.vocab.tokenize(p, l)).collect();
        let mut tape = Tape::new();
        let v = self.model.text.forward(&mut tape, &self.model.store, &ids)?;
        Ok(tape.to_tensor(v))
    }

    /// Scaled posterior means of `images`.
    pub fn encode_images(&self, images: &[ImageTensor]) -> Result<Tensor<f32>> {
        let s = self.model.config.image_side;
        let mut data = Vec::with_capacity(images.len() * 3 * s * s);
        for im in images {
            if im.height() != s || im.width() != s {
                return Err(Error::dim("encode_images", &[im.height(), im.width()], &[s, s]));
            }
            data.extend_from_slice(im.data());
        }
        let mut tape = Tape::new();
        let x = tape.constant(&[images.len(), 3, s, s], data)?;
        let (mean, _) = self.model.vae.encode(&mut tape, &self.model.store, x)?;
        let mut t = tape.to_tensor(mean);
        for v in t.data_mut() {
            *v *= self.latent_scale;
        }
        Ok(t)
    }

    pub fn decode_latents(&self, z: &Tensor<f32>) -> Result<Vec<ImageTensor>> {
        let unscaled: Vec<f32> = z.data().iter().map(|v| v / self.latent_scale).collect();
        let mut tape = Tape::new();
        let zv = tape.constant(z.shape(), unscaled)?;
        let img = self.model.vae.decode(&mut tape, &self.model.store, zv)?;
        let s = self.model.config.image_side;
        tape.value(img)
            .chunks(3 * s * s)
            .map(|c| ImageTensor::new(s, s, c.to_vec()))
            .collect()
    }

    /// Noise prediction at 1-based timestep `t`, with guidance when the
    /// scale exceeds 1.
    fn predict(&self, x: &[f32], t: usize, cond: &Tensor<f32>, uncond: Option<&Tensor<f32>>, scale: f64) -> Result<Vec<f32>> {
        let n = cond.shape()[0];
        let [c, h, w] = self.model.config.latent_shape();
        let run = |ctx: &Tensor<f32>| -> Result<Vec<f32>> {
            let mut tape = Tape::new();
            let xv = tape.constant(&[n, c, h, w], x.to_vec())?;
            let cv = tape.input(ctx);
            let out = self.model.unet.forward(&mut tape, &self.model.store, xv, &vec![t - 1; n], cv)?;
            Ok(tape.value(out).to_vec())
        };
        let e_cond = run(cond)?;
        match uncond {
            Some(u) if scale > 1.0 => {
                let e_unc = run(u)?;
                let s = scale as f32;
                Ok(e_unc.iter().zip(&e_cond).map(|(&u, &c)| u + s * (c - u)).collect())
            }
            _ => Ok(e_cond),
        }
    }

    fn denoise(&self, prompts: &[&str], opts: &SampleOptions, rng: &mut ChaCha8Rng, hook: &mut StepHook) -> Result<Vec<f32>> {
        if opts.guidance_scale < 1.0 || !opts.guidance_scale.is_finite() {
            return Err(Error::Config(format!("guidance scale {} must be ≥ 1", opts.guidance_scale)));
        }
        if opts.sampler == SamplerKind::Pndm && opts.steps < 4 {
            return Err(Error::Config("PNDM sampling needs at least 4 steps".into()));
        }
        let n = prompts.len();
        let cond = self.encode_prompts(prompts)?;
        let uncond = if opts.guidance_scale > 1.0 {
            Some(self.encode_prompts(&vec![""; n])?)
        } else {
            None
        };
        let [c, h, w] = self.model.config.latent_shape();
        let mut x = Tensor::<f32>::randn(&[n, c, h, w], 1.0, rng).into_data();
        let mut pndm = PndmState::<f32>::new();
        for (t, t_next) in transitions(self.schedule.t_max(), opts.steps)? {
            let eps = self.predict(&x, t, &cond, uncond.as_ref(), opts.guidance_scale)?;
            x = match opts.sampler {
                SamplerKind::Ddpm => {
                    let z = if t_next == 0 {
                        vec![0.0; x.len()]
                    } else {
                        Tensor::<f32>::randn(&[x.len()], 1.0, rng).into_data()
                    };
                    ddpm_transition(self.schedule, &x, &eps, t, t_next, &z)?
                }
                SamplerKind::Pndm => {
                    let mut eval = |xs: &[f32], ts: usize| self.predict(xs, ts, &cond, uncond.as_ref(), opts.guidance_scale);
                    pndm.step(self.schedule, &x, eps, t, t_next, &mut eval)?
                }
            };
            hook(t_next, &mut x, rng)?;
        }
        Ok(x)
    }

    /// One image per prompt; the seed fixes every random draw.
    pub fn sample(&self, prompts: &[&str], opts: &SampleOptions) -> Result<Vec<ImageTensor>> {
        if prompts.is_empty() {
            return Err(Error::Config("nothing to sample".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let x = self.denoise(prompts, opts, &mut rng, &mut |_, _, _| Ok(()))?;
        let [c, h, w] = self.model.config.latent_shape();
        self.decode_latents(&Tensor::new(&[prompts.len(), c, h, w], x)?)
    }

    pub fn inpaint(&self, task: &InpaintTask, opts: &SampleOptions) -> Result<ImageTensor> {
        self.inpaint_traced(task, opts, &mut |_, _, _, _| {})
    }

    /// [`Pipeline::inpaint`] reporting `(t_next, latent, ε, known)` right
    /// after each known-region overwrite.
    pub fn inpaint_traced(
        &self,
        task: &InpaintTask,
        opts: &SampleOptions,
        trace: &mut dyn FnMut(usize, &[f32], &[f32], &[bool]),
    ) -> Result<ImageTensor> {
        let side = self.model.config.image_side;
        if task.source.height() != side || task.source.width() != side {
            return Err(Error::dim(
                "inpaint source",
                &[task.source.height(), task.source.width()],
                &[side, side],
            ));
        }
        let f = self.model.config.vae.downsample_factor();
        let known = latent_known_mask(&task.mask, side, f);
        let z0 = self.encode_images(std::slice::from_ref(&task.source))?.into_data();
        let [c, h, w] = self.model.config.latent_shape();
        let plane = h * w;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let sched = self.schedule;
        let mut hook = |t_next: usize, x: &mut Vec<f32>, rng: &mut ChaCha8Rng| -> Result<()> {
            let eps = Tensor::<f32>::randn(&[c * plane], 1.0, rng).into_data();
            let noised = sched.q_sample(&z0, t_next, &eps)?;
            for ch in 0..c {
                for (i, &k) in known.iter().enumerate() {
                    if k {
                        x[ch * plane + i] = noised[ch * plane + i];
                    }
                }
            }
            trace(t_next, x, &eps, &known);
            Ok(())
        };
        let x = self.denoise(&[task.prompt.as_str()], opts, &mut rng, &mut hook)?;
        let mut out = self
            .decode_latents(&Tensor::new(&[1, c, h, w], x)?)?
            .pop()
            .expect("one latent decodes to one image");
        for y in 0..side {
            for xx in 0..side {
                if task.mask[y * side + xx] == 0 {
                    for ch in 0..3 {
                        out.set(ch, y, xx, task.source.get(ch, y, xx));
                    }
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::ModelConfig;

    fn fixture() -> (Model<f32>, Vocab, NoiseSchedule) {
        let vocab = Vocab::build(["a pavilion by the pond", "a moon"]);
        let model = Model::<f32>::new(ModelConfig::tiny(vocab.len(), 50), 3).unwrap();
        (model, vocab, NoiseSchedule::default_for(50).unwrap())
    }

    #[test]
    fn sampling_is_deterministic() {
        let (m, v, s) = fixture();
        let p = Pipeline::new(&m, &v, &s, 1.0).unwrap();
        for sampler in [SamplerKind::Ddpm, SamplerKind::Pndm] {
            let opts = SampleOptions {
                steps: 5,
                seed: 11,
                sampler,
                guidance_scale: 1.0,
            };
            let a = p.sample(&["a moon"], &opts).unwrap();
            let b = p.sample(&["a moon"], &opts).unwrap();
            assert_eq!(a[0].data(), b[0].data());
        }
    }

    #[test]
    fn guidance_one_skips_unconditional_branch() {
        let (m, v, s) = fixture();
        let p = Pipeline::new(&m, &v, &s, 1.0).unwrap();
        let cond = p.encode_prompts(&["a pavilion"]).unwrap();
        let x = vec![0.3f32; 2 * 4 * 4];
        let plain = p.predict(&x, 10, &cond, None, 1.0).unwrap();
        let uncond = p.encode_prompts(&[""]).unwrap();
        let with = p.predict(&x, 10, &cond, Some(&uncond), 1.0).unwrap();
        assert_eq!(plain, with);
        let guided = p.predict(&x, 10, &cond, Some(&uncond), 3.0).unwrap();
        assert_ne!(plain, guided);
    }

    #[test]
    fn unloaded_model_is_a_state_error() {
        let (m, v, s) = fixture();
        assert!(matches!(Pipeline::new(&m, &v, &s, 0.0), Err(Error::State(_))));
    }

    #[test]
    fn degenerate_masks_are_rejected() {
        let img = ImageTensor::filled(8, 8, [0.0; 3]);
        assert!(InpaintTask::new(img.clone(), vec![0; 64], "x").is_err());
        assert!(InpaintTask::new(img.clone(), vec![1; 64], "x").is_err());
        assert!(InpaintTask::new(img, vec![2; 64], "x").is_err());
    }

    #[test]
    fn majority_vote_downsampling() {
        // 4×4 image, f = 2: top-left block has 3 zeros, top-right 2 zeros.
        #[rustfmt::skip]
        let mask = [
            0, 0, 0, 1,
            0, 1, 1, 0,
            1, 1, 0, 0,
            1, 1, 0, 0,
        ];
        assert_eq!(latent_known_mask(&mask, 4, 2), vec![true, false, false, true]);
    }

    #[test]
    fn inpaint_keeps_known_pixels_and_renoises_known_latents() {
        let (m, v, s) = fixture();
        let p = Pipeline::new(&m, &v, &s, 1.0).unwrap();
        let mut bytes = vec![0u8; 8 * 8 * 3];
        for (i, b) in bytes.iter_mut().enumerate() {
            *b = (i * 13 % 256) as u8;
        }
        let src = ImageTensor::from_rgb8(8, 8, &bytes).unwrap();
        let mut mask = vec![0u8; 64];
        mask[3 * 8 + 4] = 1;
        let task = InpaintTask::new(src.clone(), mask.clone(), "a moon").unwrap();
        let z0 = p.encode_images(std::slice::from_ref(&src)).unwrap().into_data();
        let mut checks = 0;
        let out = p
            .inpaint_traced(
                &task,
                &SampleOptions {
                    steps: 5,
                    seed: 4,
                    sampler: SamplerKind::Pndm,
                    guidance_scale: 1.0,
                },
                &mut |t_next, x, eps, known| {
                    let expect = s.q_sample(&z0, t_next, eps).unwrap();
                    let plane = known.len();
                    for (i, &k) in known.iter().enumerate() {
                        if k {
                            for c in 0..x.len() / plane {
                                assert_eq!(x[c * plane + i].to_bits(), expect[c * plane + i].to_bits());
                                checks += 1;
                            }
                        }
                    }
                },
            )
            .unwrap();
        assert!(checks > 0);
        for y in 0..8 {
            for x in 0..8 {
                if mask[y * 8 + x] == 0 {
                    for c in 0..3 {
                        assert_eq!(out.get(c, y, x).to_bits(), src.get(c, y, x).to_bits());
                    }
                }
            }
        }
    }
}
