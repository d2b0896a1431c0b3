//! Text encoder, VAE and conditional U-Net, all registered in one
//! [`ParamStore`] under the `text.`, `vae.` and `unet.` prefixes.

mod layers;
mod text;
mod tokenizer;
mod unet;
mod vae;

pub use layers::{group_count, sinusoidal, Attention, Conv2d, GroupNorm, LayerNorm, Linear, ResBlock};
pub use text::TextEncoder;
pub use tokenizer::{split_words, Vocab, BOS, EOS, PAD, UNK};
pub use unet::{SpatialTransformer, UNet};
pub use vae::{kl_divergence, Vae, LOGVAR_MAX, LOGVAR_MIN};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{scaled_betas, NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Real};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub context_len: usize,
    pub layers: usize,
    pub ff_mult: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VaeConfig {
    /// Channel width per level, full resolution first; each further level
    /// halves the spatial size.
    pub channels: Vec<usize>,
    pub latent_channels: usize,
}

impl VaeConfig {
    pub fn downsample_factor(&self) -> usize {
        1 << (self.channels.len().saturating_sub(1))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    /// Whether each level hosts a spatial transformer.
    pub attention: Vec<bool>,
    pub ff_mult: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_side: usize,
    /// Diffusion steps `T`; the U-Net accepts timestep indices `0..T`.
    pub timesteps: usize,
    /// Endpoints of the linear β schedule.
    pub beta_start: f64,
    pub beta_end: f64,
    pub text: TextConfig,
    pub vae: VaeConfig,
    pub unet: UNetConfig,
}

impl ModelConfig {
    /// S=32, f=4, 4×8×8 latents, 64-wide text over 40 tokens, U-Net base 32
    /// with multipliers (1, 2) and transformers at both resolutions.
    ///
    /// The β range is stretched by `1000/T` for shorter schedules so the
    /// final noise level matches the 1000-step default.
    pub fn desk(vocab_size: usize, timesteps: usize) -> Self {
        let (beta_start, beta_end) = scaled_betas(timesteps);
        ModelConfig {
            image_side: 32,
            timesteps,
            beta_start,
            beta_end,
            text: TextConfig {
                vocab_size,
                d_model: 64,
                context_len: 40,
                layers: 2,
                ff_mult: 4,
            },
            vae: VaeConfig {
                channels: vec![16, 32, 32],
                latent_channels: 4,
            },
            unet: UNetConfig {
                base_channels: 32,
                channel_mult: vec![1, 2],
                attention: vec![true, true],
                ff_mult: 4,
            },
        }
    }

    /// Miniature model (S=8, f=2) for gradient checks.
    pub fn tiny(vocab_size: usize, timesteps: usize) -> Self {
        ModelConfig {
            image_side: 8,
            timesteps,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            text: TextConfig {
                vocab_size,
                d_model: 8,
                context_len: 5,
                layers: 1,
                ff_mult: 2,
            },
            vae: VaeConfig {
                channels: vec![4, 4],
                latent_channels: 2,
            },
            unet: UNetConfig {
                base_channels: 4,
                channel_mult: vec![1, 2],
                attention: vec![true, true],
                ff_mult: 2,
            },
        }
    }

    pub fn latent_side(&self) -> usize {
        self.image_side / self.vae.downsample_factor()
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        let s = self.latent_side();
        [self.vae.latent_channels, s, s]
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.noise_schedule()?;
        let f = self.vae.downsample_factor();
        if self.vae.channels.is_empty() || self.vae.channels.contains(&0) || self.vae.latent_channels == 0 {
            return bad("vae channels must be non-empty and positive".into());
        }
        if self.image_side == 0 || !self.image_side.is_multiple_of(f) {
            return bad(format!("image side {} is not divisible by f = {f}", self.image_side));
        }
        let levels = self.unet.channel_mult.len();
        if levels == 0 || self.unet.attention.len() != levels || self.unet.base_channels == 0 {
            return bad("unet channel_mult and attention must be non-empty and of equal length".into());
        }
        if !self.latent_side().is_multiple_of(1 << (levels - 1)) {
            return bad(format!(
                "latent side {} cannot be halved {} times",
                self.latent_side(),
                levels - 1
            ));
        }
        if !self.unet.base_channels.is_multiple_of(2) || !self.text.d_model.is_multiple_of(2) {
            return bad("sinusoidal embeddings need even widths".into());
        }
        if self.text.context_len < 2 || self.text.vocab_size < 4 || self.timesteps == 0 {
            return bad("context length ≥ 2, vocabulary ≥ 4 and T ≥ 1 are required".into());
        }
        Ok(())
    }
}

/// The three networks with their shared parameter store.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub text: TextEncoder,
    pub vae: Vae,
    pub unet: UNet,
}

impl<T: Real> Model<T> {
    /// Freshly initialized model; the same seed gives the same weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let text = TextEncoder::new(&mut store, &config.text, &mut rng)?;
        let vae = Vae::new(&mut store, &config.vae, config.image_side, &mut rng)?;
        let unet = UNet::new(
            &mut store,
            &config.unet,
            config.vae.latent_channels,
            config.latent_side(),
            config.text.d_model,
            config.timesteps,
            &mut rng,
        )?;
        Ok(Model {
            config,
            store,
            text,
            vae,
            unet,
        })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            text: self.text.clone(),
            vae: self.vae.clone(),
            unet: self.unet.clone(),
        }
    }
}

#[cfg(test)]
mod tests;
