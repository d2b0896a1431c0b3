use rand::Rng;

use super::layers::{sinusoidal, Attention, LayerNorm, Linear};
use super::TextConfig;
use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Real, Tape, Var};

#[derive(Debug, Clone)]
struct TextBlock {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

/// Token embedding plus sinusoidal positions, then pre-norm transformer
/// blocks with full (non-causal) self-attention.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub config: TextConfig,
    token_emb: ParamId,
    blocks: Vec<TextBlock>,
    final_norm: LayerNorm,
}

impl TextEncoder {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, config: &TextConfig, rng: &mut R) -> Result<Self> {
        let d = config.d_model;
        let token_emb = store.add_normal("text.token_emb", &[config.vocab_size, d], rng)?;
        let blocks = (0..config.layers)
            .map(|i| {
                let p = format!("text.blocks.{i}");
                Ok(TextBlock {
                    ln1: LayerNorm::new(store, &format!("{p}.ln1"), d)?,
                    attn: Attention::new(store, &format!("{p}.attn"), d, d, rng)?,
                    ln2: LayerNorm::new(store, &format!("{p}.ln2"), d)?,
                    ff1: Linear::new(store, &format!("{p}.ff1"), d, d * config.ff_mult, true, rng)?,
                    ff2: Linear::new(store, &format!("{p}.ff2"), d * config.ff_mult, d, true, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        let final_norm = LayerNorm::new(store, "text.final_norm", d)?;
        Ok(TextEncoder {
            config: config.clone(),
            token_emb,
            blocks,
            final_norm,
        })
    }

    /// `ids`: one length-L sequence per batch item → `[B, L, d_text]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, ids: &[Vec<usize>]) -> Result<Var> {
        let (l, d) = (self.config.context_len, self.config.d_model);
        if let Some(bad) = ids.iter().find(|s| s.len() != l) {
            return Err(Error::dim("encode_text", &[bad.len()], &[l]));
        }
        let b = ids.len();
        let flat: Vec<usize> = ids.iter().flatten().copied().collect();
        let table = tape.param(store, self.token_emb);
        let emb = tape.embedding(table, &flat)?;
        let pos_one = sinusoidal(&(0..l).map(|p| p as f64).collect::<Vec<_>>(), d);
        let pos: Vec<T> = (0..b).flat_map(|_| pos_one.iter().map(|&v| T::lit(v))).collect();
        let pos = tape.constant(&[b * l, d], pos)?;
        let h = tape.add(emb, pos)?;
        let mut h = tape.reshape(h, &[b, l, d])?;
        for blk in &self.blocks {
            let a = blk.ln1.forward(tape, store, h)?;
            let a = blk.attn.forward(tape, store, a, a)?;
            h = tape.add(h, a)?;
            let f = blk.ln2.forward(tape, store, h)?;
            let f = blk.ff1.forward(tape, store, f)?;
            let f = tape.silu(f);
            let f = blk.ff2.forward(tape, store, f)?;
            h = tape.add(h, f)?;
        }
        self.final_norm.forward(tape, store, h)
    }
}
