//! Noise schedule, forward process, training loss, DDPM/PNDM samplers and
//! mask-guided inpainting.
//!
//! Timesteps are 1-based here (`1..=T`, with 0 meaning the clean signal);
//! the U-Net receives `t − 1`.

mod loss;
mod pipeline;
mod sampler;
mod schedule;

pub use loss::diffusion_loss;
pub use pipeline::{latent_known_mask, InpaintTask, Pipeline, SampleOptions};
pub use sampler::{
    ddpm_step, ddpm_transition, plms_combine, pndm_transfer, step_indices, transitions, PndmState, SamplerKind,
    PNDM_WARMUP,
};
pub use schedule::{q_sample_with, scaled_betas, NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START};
