use rand::Rng;

use super::layers::{Conv2d, GroupNorm, ResBlock};
use super::VaeConfig;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Real, Tape, Var};

pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;

#[derive(Debug, Clone)]
struct DownLevel {
    norm: GroupNorm,
    conv: Conv2d,
}

#[derive(Debug, Clone)]
struct UpLevel {
    norm: GroupNorm,
    conv: Conv2d,
    res: Option<ResBlock>,
}

/// Convolutional VAE: each level halves (encoder) or doubles (decoder) the
/// spatial size; a residual block sits at latent resolution on both sides.
#[derive(Debug, Clone)]
pub struct Vae {
    pub config: VaeConfig,
    image_side: usize,
    enc_in: Conv2d,
    enc_down: Vec<DownLevel>,
    enc_mid: ResBlock,
    enc_norm: GroupNorm,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec_mid: ResBlock,
    dec_up: Vec<UpLevel>,
    dec_norm: GroupNorm,
    dec_out: Conv2d,
}

impl Vae {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: &VaeConfig,
        image_side: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let ch = &config.channels;
        let top = *ch.last().ok_or_else(|| Error::Config("vae needs at least one level".into()))?;
        let c_lat = config.latent_channels;
        let enc_in = Conv2d::new(store, "vae.enc.conv_in", 3, ch[0], 3, rng)?;
        let enc_down = (1..ch.len())
            .map(|i| {
                Ok(DownLevel {
                    norm: GroupNorm::new(store, &format!("vae.enc.down{i}.norm"), ch[i - 1])?,
                    conv: Conv2d::new(store, &format!("vae.enc.down{i}.conv"), ch[i - 1], ch[i], 3, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        let enc_mid = ResBlock::new(store, "vae.enc.mid", top, top, None, rng)?;
        let enc_norm = GroupNorm::new(store, "vae.enc.norm_out", top)?;
        let enc_out = Conv2d::new(store, "vae.enc.conv_out", top, 2 * c_lat, 3, rng)?;

        let dec_in = Conv2d::new(store, "vae.dec.conv_in", c_lat, top, 3, rng)?;
        let dec_mid = ResBlock::new(store, "vae.dec.mid", top, top, None, rng)?;
        let dec_up = (1..ch.len())
            .rev()
            .map(|i| {
                let res = if i > 1 {
                    Some(ResBlock::new(store, &format!("vae.dec.up{i}.res"), ch[i - 1], ch[i - 1], None, rng)?)
                } else {
                    None
                };
                Ok(UpLevel {
                    norm: GroupNorm::new(store, &format!("vae.dec.up{i}.norm"), ch[i])?,
                    conv: Conv2d::new(store, &format!("vae.dec.up{i}.conv"), ch[i], ch[i - 1], 3, rng)?,
                    res,
                })
            })
            .collect::<Result<_>>()?;
        let dec_norm = GroupNorm::new(store, "vae.dec.norm_out", ch[0])?;
        let dec_out = Conv2d::new(store, "vae.dec.conv_out", ch[0], 3, 3, rng)?;
        Ok(Vae {
            config: config.clone(),
            image_side,
            enc_in,
            enc_down,
            enc_mid,
            enc_norm,
            enc_out,
            dec_in,
            dec_mid,
            dec_up,
            dec_norm,
            dec_out,
        })
    }

    pub fn latent_side(&self) -> usize {
        self.image_side / self.config.downsample_factor()
    }

    /// `x: [N, 3, S, S]` → `(mean, logvar)`, each `[N, c_lat, S/f, S/f]`.
    pub fn encode<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<(Var, Var)> {
        let s = tape.shape(x).to_vec();
        let side = self.image_side;
        if s.len() != 4 || s[1] != 3 || s[2] != side || s[3] != side {
            return Err(Error::dim("vae_encode", &s, &[s.first().copied().unwrap_or(0), 3, side, side]));
        }
        let mut h = self.enc_in.forward(tape, store, x)?;
        for lvl in &self.enc_down {
            h = lvl.norm.forward(tape, store, h)?;
            h = tape.silu(h);
            h = tape.avg_pool2(h)?;
            h = lvl.conv.forward(tape, store, h)?;
        }
        h = self.enc_mid.forward(tape, store, h, None)?;
        h = self.enc_norm.forward(tape, store, h)?;
        h = tape.silu(h);
        let moments = self.enc_out.forward(tape, store, h)?;
        let c = self.config.latent_channels;
        let mean = tape.slice(moments, 1, 0, c)?;
        let logvar = tape.slice(moments, 1, c, c)?;
        let logvar = tape.clamp(logvar, LOGVAR_MIN, LOGVAR_MAX);
        Ok((mean, logvar))
    }

    /// `mean + exp(logvar/2)·noise`.
    pub fn sample<T: Real>(&self, tape: &mut Tape<T>, mean: Var, logvar: Var, noise: Var) -> Result<Var> {
        let half = tape.scale(logvar, 0.5);
        let std = tape.exp(half);
        let eps = tape.mul(std, noise)?;
        tape.add(mean, eps)
    }

    /// `z: [N, c_lat, S/f, S/f]` → `[N, 3, S, S]` in `(−1, 1)`.
    pub fn decode<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, z: Var) -> Result<Var> {
        let s = tape.shape(z).to_vec();
        let ls = self.latent_side();
        let c = self.config.latent_channels;
        if s.len() != 4 || s[1] != c || s[2] != ls || s[3] != ls {
            return Err(Error::dim("vae_decode", &s, &[s.first().copied().unwrap_or(0), c, ls, ls]));
        }
        let mut h = self.dec_in.forward(tape, store, z)?;
        h = self.dec_mid.forward(tape, store, h, None)?;
        for lvl in &self.dec_up {
            h = lvl.norm.forward(tape, store, h)?;
            h = tape.silu(h);
            h = tape.upsample2(h)?;
            h = lvl.conv.forward(tape, store, h)?;
            if let Some(res) = &lvl.res {
                h = res.forward(tape, store, h, None)?;
            }
        }
        h = self.dec_norm.forward(tape, store, h)?;
        h = tape.silu(h);
        h = self.dec_out.forward(tape, store, h)?;
        Ok(tape.tanh(h))
    }
}

/// `½·mean(μ² + σ² − 1 − log σ²)`: the Gaussian KL to N(0, I), averaged
/// per latent element so its weight is independent of latent size.
pub fn kl_divergence<T: Real>(tape: &mut Tape<T>, mean: Var, logvar: Var) -> Result<Var> {
    let mu2 = tape.mul(mean, mean)?;
    let var = tape.exp(logvar);
    let a = tape.add(mu2, var)?;
    let b = tape.sub(a, logvar)?;
    let m = tape.mean(b);
    let one = tape.constant(&[1], vec![T::one()])?;
    let d = tape.sub(m, one)?;
    Ok(tape.scale(d, 0.5))
}
