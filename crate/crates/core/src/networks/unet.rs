use rand::Rng;

use super::layers::{sinusoidal, Attention, Conv2d, GroupNorm, LayerNorm, Linear, ResBlock};
use super::UNetConfig;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Real, Tape, Var};

/// Pre-norm transformer over the pixels of a feature map: self-attention,
/// cross-attention to the text sequence, then a feed-forward layer, each
/// added back onto the feature map.
#[derive(Debug, Clone)]
pub struct SpatialTransformer {
    ln1: LayerNorm,
    pub self_attn: Attention,
    ln2: LayerNorm,
    pub cross_attn: Attention,
    ln3: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

impl SpatialTransformer {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        d_text: usize,
        ff_mult: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(SpatialTransformer {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), channels)?,
            self_attn: Attention::new(store, &format!("{name}.self_attn"), channels, channels, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), channels)?,
            cross_attn: Attention::new(store, &format!("{name}.cross_attn"), channels, d_text, rng)?,
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), channels)?,
            ff1: Linear::new(store, &format!("{name}.ff1"), channels, channels * ff_mult, true, rng)?,
            ff2: Linear::new(store, &format!("{name}.ff2"), channels * ff_mult, channels, true, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, ctx: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let h = tape.reshape(x, &[n, c, hw])?;
        let mut h = tape.permute_021(h)?;
        let a = self.ln1.forward(tape, store, h)?;
        let a = self.self_attn.forward(tape, store, a, a)?;
        h = tape.add(h, a)?;
        let a = self.ln2.forward(tape, store, h)?;
        let a = self.cross_attn.forward(tape, store, a, ctx)?;
        h = tape.add(h, a)?;
        let f = self.ln3.forward(tape, store, h)?;
        let f = self.ff1.forward(tape, store, f)?;
        let f = tape.silu(f);
        let f = self.ff2.forward(tape, store, f)?;
        h = tape.add(h, f)?;
        let h = tape.permute_021(h)?;
        tape.reshape(h, &s)
    }
}

#[derive(Debug, Clone)]
struct Level {
    res: ResBlock,
    attn: Option<SpatialTransformer>,
    /// Down path: pool then conv. Up path: upsample then conv.
    resample: Option<Conv2d>,
}

/// Noise predictor: one residual block (plus transformer where configured)
/// per resolution on the way down and again on the way up, with skip
/// concatenation between matching resolutions.
#[derive(Debug, Clone)]
pub struct UNet {
    pub config: UNetConfig,
    latent_channels: usize,
    latent_side: usize,
    timesteps: usize,
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    down: Vec<Level>,
    up: Vec<Level>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl UNet {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: &UNetConfig,
        latent_channels: usize,
        latent_side: usize,
        d_text: usize,
        timesteps: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let base = config.base_channels;
        let temb = base * 4;
        let ch: Vec<usize> = config.channel_mult.iter().map(|m| m * base).collect();
        let levels = ch.len();
        let time1 = Linear::new(store, "unet.time.lin1", base, temb, true, rng)?;
        let time2 = Linear::new(store, "unet.time.lin2", temb, temb, true, rng)?;
        let conv_in = Conv2d::new(store, "unet.conv_in", latent_channels, base, 3, rng)?;

        let mut down = Vec::with_capacity(levels);
        let mut cur = base;
        for i in 0..levels {
            let p = format!("unet.down{i}");
            let res = ResBlock::new(store, &format!("{p}.res"), cur, ch[i], Some(temb), rng)?;
            cur = ch[i];
            let attn = if config.attention[i] {
                Some(SpatialTransformer::new(store, &format!("{p}.tf"), cur, d_text, config.ff_mult, rng)?)
            } else {
                None
            };
            let resample = if i + 1 < levels {
                Some(Conv2d::new(store, &format!("{p}.downsample"), cur, cur, 3, rng)?)
            } else {
                None
            };
            down.push(Level { res, attn, resample });
        }

        let mut up = Vec::with_capacity(levels);
        for i in (0..levels).rev() {
            let p = format!("unet.up{i}");
            let res = ResBlock::new(store, &format!("{p}.res"), cur + ch[i], ch[i], Some(temb), rng)?;
            cur = ch[i];
            let attn = if config.attention[i] {
                Some(SpatialTransformer::new(store, &format!("{p}.tf"), cur, d_text, config.ff_mult, rng)?)
            } else {
                None
            };
            let resample = if i > 0 {
                Some(Conv2d::new(store, &format!("{p}.upsample"), cur, cur, 3, rng)?)
            } else {
                None
            };
            up.push(Level { res, attn, resample });
        }
        let norm_out = GroupNorm::new(store, "unet.norm_out", base)?;
        let conv_out = Conv2d::new(store, "unet.conv_out", base, latent_channels, 3, rng)?;
        Ok(UNet {
            config: config.clone(),
            latent_channels,
            latent_side,
            timesteps,
            time1,
            time2,
            conv_in,
            down,
            up,
            norm_out,
            conv_out,
        })
    }

    pub fn transformers(&self) -> impl Iterator<Item = &SpatialTransformer> {
        self.down.iter().chain(&self.up).filter_map(|l| l.attn.as_ref())
    }

    /// Predicts the noise in `z_t: [N, c, h, w]`.
    ///
    /// `t` holds one zero-based timestep index per item, each `< T`;
    /// `ctx: [N, L, d_text]` is the text embedding.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        z: Var,
        t: &[usize],
        ctx: Var,
    ) -> Result<Var> {
        let s = tape.shape(z).to_vec();
        let (c, side) = (self.latent_channels, self.latent_side);
        if s.len() != 4 || s[1] != c || s[2] != side || s[3] != side {
            return Err(Error::dim("unet", &s, &[s.first().copied().unwrap_or(0), c, side, side]));
        }
        let n = s[0];
        if t.len() != n {
            return Err(Error::dim("unet timesteps", &[t.len()], &[n]));
        }
        if let Some(&bad) = t.iter().find(|&&ti| ti >= self.timesteps) {
            return Err(Error::Timestep {
                t: bad,
                lo: 0,
                hi: self.timesteps - 1,
            });
        }
        let cs = tape.shape(ctx).to_vec();
        if cs.len() != 3 || cs[0] != n {
            return Err(Error::dim("unet context", &cs, &[n]));
        }

        let base = self.config.base_channels;
        let feats = sinusoidal(&t.iter().map(|&v| v as f64).collect::<Vec<_>>(), base);
        let feats = tape.constant(&[n, base], feats.into_iter().map(T::lit).collect())?;
        let e = self.time1.forward(tape, store, feats)?;
        let e = tape.silu(e);
        let e = self.time2.forward(tape, store, e)?;
        let temb = tape.silu(e);

        let mut h = self.conv_in.forward(tape, store, z)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for lvl in &self.down {
            h = lvl.res.forward(tape, store, h, Some(temb))?;
            if let Some(tf) = &lvl.attn {
                h = tf.forward(tape, store, h, ctx)?;
            }
            skips.push(h);
            if let Some(conv) = &lvl.resample {
                h = tape.avg_pool2(h)?;
                h = conv.forward(tape, store, h)?;
            }
        }
        for lvl in &self.up {
            let skip = skips.pop().expect("one skip per level");
            h = tape.concat(h, skip, 1)?;
            h = lvl.res.forward(tape, store, h, Some(temb))?;
            if let Some(tf) = &lvl.attn {
                h = tf.forward(tape, store, h, ctx)?;
            }
            if let Some(conv) = &lvl.resample {
                h = tape.upsample2(h)?;
                h = conv.forward(tape, store, h)?;
            }
        }
        h = self.norm_out.forward(tape, store, h)?;
        h = tape.silu(h);
        self.conv_out.forward(tape, store, h)
    }
}
