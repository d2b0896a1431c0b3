use rand::Rng;

use crate::error::Result;
use crate::numerics::{ParamId, ParamStore, Real, Tape, Var};

/// Dense layer `y = x·Wᵀ + b` with `W: [d_out, d_in]`.
///
/// If a low-rank adapter is bound to `W` and not merged, the forward pass
/// adds `(alpha/r)·(x·Aᵀ)·Bᵀ` before the bias.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add_normal(format!("{name}.weight"), &[d_out, d_in], rng)?;
        let bias = if bias {
            Some(store.add_zeros(format!("{name}.bias"), &[d_out])?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let mut y = tape.matmul_nt(x, w)?;
        if let Some(binding) = store.lora_binding(self.weight) {
            if !binding.merged {
                let a = tape.param(store, binding.a);
                let b = tape.param(store, binding.b);
                let xa = tape.matmul_nt(x, a)?;
                let mut delta = tape.matmul_nt(xa, b)?;
                if binding.scale() != 1.0 {
                    delta = tape.scale(delta, binding.scale());
                }
                y = tape.add(y, delta)?;
            }
        }
        if let Some(b) = self.bias {
            let b = tape.param(store, b);
            y = tape.add_row_bias(y, b)?;
        }
        Ok(y)
    }
}

/// Same-size square convolution with bias (`pad = k/2`, stride 1).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add_normal(format!("{name}.weight"), &[c_out, c_in, kernel, kernel], rng)?;
        let bias = store.add_zeros(format!("{name}.bias"), &[c_out])?;
        Ok(Conv2d { weight, bias, kernel })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.conv2d(x, w, 1, self.kernel / 2)?;
        tape.add_channel_bias(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

pub const NORM_EPS: f64 = 1e-5;

/// Largest group count ≤ 8 dividing `channels` that leaves at least two
/// channels per group. With one channel per group a per-channel bias added
/// before the norm (the timestep embedding) would be normalized away.
pub fn group_count(channels: usize) -> usize {
    (1..=8).rev().find(|g| channels.is_multiple_of(*g) && channels / g >= 2).unwrap_or(1)
}

impl GroupNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(GroupNorm {
            gamma: store.add_ones(format!("{name}.gamma"), &[channels])?,
            beta: store.add_zeros(format!("{name}.beta"), &[channels])?,
            groups: group_count(channels),
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.group_norm(x, g, b, self.groups, NORM_EPS)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.add_ones(format!("{name}.gamma"), &[d])?,
            beta: store.add_zeros(format!("{name}.beta"), &[d])?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, NORM_EPS)
    }
}

/// Pre-activation residual block: GN → SiLU → conv → (+ time bias) → GN →
/// SiLU → conv, plus a 1×1 projection on the skip path when widths differ.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub norm1: GroupNorm,
    pub conv1: Conv2d,
    pub time: Option<Linear>,
    pub norm2: GroupNorm,
    pub conv2: Conv2d,
    pub skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        temb_dim: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        let norm1 = GroupNorm::new(store, &format!("{name}.norm1"), c_in)?;
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), c_in, c_out, 3, rng)?;
        let time = match temb_dim {
            Some(d) => Some(Linear::new(store, &format!("{name}.time"), d, c_out, true, rng)?),
            None => None,
        };
        let norm2 = GroupNorm::new(store, &format!("{name}.norm2"), c_out)?;
        let conv2 = Conv2d::new(store, &format!("{name}.conv2"), c_out, c_out, 3, rng)?;
        let skip = if c_in != c_out {
            Some(Conv2d::new(store, &format!("{name}.skip"), c_in, c_out, 1, rng)?)
        } else {
            None
        };
        Ok(ResBlock {
            norm1,
            conv1,
            time,
            norm2,
            conv2,
            skip,
        })
    }

    /// `temb` is the already-activated `[N, temb_dim]` embedding.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, temb: Option<Var>) -> Result<Var> {
        let h = self.norm1.forward(tape, store, x)?;
        let h = tape.silu(h);
        let mut h = self.conv1.forward(tape, store, h)?;
        if let (Some(lin), Some(temb)) = (&self.time, temb) {
            let tb = lin.forward(tape, store, temb)?;
            h = tape.add_channel_bias(h, tb)?;
        }
        let h = self.norm2.forward(tape, store, h)?;
        let h = tape.silu(h);
        let h = self.conv2.forward(tape, store, h)?;
        let skip = match &self.skip {
            Some(c) => c.forward(tape, store, x)?,
            None => x,
        };
        tape.add(h, skip)
    }
}

/// Single-head attention with `q, k, v, out` projections.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl Attention {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_model: usize,
        d_context: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Attention {
            q: Linear::new(store, &format!("{name}.q"), d_model, d_model, false, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d_context, d_model, false, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d_context, d_model, false, rng)?,
            out: Linear::new(store, &format!("{name}.out"), d_model, d_model, true, rng)?,
        })
    }

    /// `x: [B, Lq, d_model]`, `ctx: [B, Lk, d_context]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, ctx: Var) -> Result<Var> {
        let q = self.q.forward(tape, store, x)?;
        let k = self.k.forward(tape, store, ctx)?;
        let v = self.v.forward(tape, store, ctx)?;
        let a = tape.attention(q, k, v)?;
        self.out.forward(tape, store, a)
    }
}

/// Fixed sinusoidal features: `[sin(p·f_j)…, cos(p·f_j)…]` with
/// `f_j = 10000^(−j/half)`.
pub fn sinusoidal(positions: &[f64], dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; positions.len() * dim];
    for (i, &p) in positions.iter().enumerate() {
        for j in 0..half {
            let f = (-(10000f64.ln()) * j as f64 / half as f64).exp();
            out[i * dim + j] = (p * f).sin();
            out[i * dim + half + j] = (p * f).cos();
        }
    }
    out
}
