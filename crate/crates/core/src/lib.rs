//! Desk-scale latent text-to-image diffusion.
//!
//! The crate trains a miniature latent diffusion model (text encoder, VAE and
//! cross-attention U-Net) from scratch on a procedural garden-scene corpus,
//! fine-tunes it with low-rank adapters on frozen weights, scores generations
//! with a contrastive dual encoder and stitches scenes into an equirectangular
//! panorama through diffusion inpainting.

mod codec;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod evaluator;
pub mod image;
pub mod lora;
pub mod networks;
pub mod numerics;
pub mod panorama;
pub mod trainer;

pub use error::{Error, Result};
