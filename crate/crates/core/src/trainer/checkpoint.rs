use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Stage, TrainConfig};
use crate::codec::{push_f32s, push_u32, ByteReader};
use crate::error::{Error, Result};
use crate::networks::{Model, ModelConfig};
use crate::numerics::{AdamConfig, AdamState, LoraBinding, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"GDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializable position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal `u128` word position.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = || Error::Corruption {
            offset: 0,
            message: "malformed rng state".into(),
        };
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

/// Complete training state at an optimizer step boundary.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub stage: Stage,
    pub step: u64,
    pub model: Model<f32>,
    pub adam: AdamState<f32>,
    pub latent_scale: Option<f32>,
    pub vocab_hash: String,
    pub rng: RngState,
    pub train_config: TrainConfig,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct AdapterEntry {
    target: String,
    a: String,
    b: String,
    rank: usize,
    alpha: f64,
    merged: bool,
}

#[derive(Serialize, Deserialize)]
struct MomentEntry {
    name: String,
    m_offset: u64,
    v_offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    stage: Stage,
    step: u64,
    model: ModelConfig,
    latent_scale: Option<f32>,
    vocab_hash: String,
    rng: RngState,
    train_config: TrainConfig,
    adam_config: AdamConfig,
    adam_steps: u64,
    tensors: Vec<TensorEntry>,
    adapters: Vec<AdapterEntry>,
    moments: Vec<MomentEntry>,
    payload_bytes: u64,
}

impl Checkpoint {
    /// Magic, version, header length, JSON header, then the f32 payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let store = &self.model.store;
        let mut payload = Vec::new();
        let mut tensors = Vec::with_capacity(store.len());
        for (_, p) in store.iter() {
            tensors.push(TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                trainable: p.trainable,
                offset: payload.len() as u64,
            });
            push_f32s(&mut payload, p.value.data());
        }
        let mut moments = Vec::new();
        for (i, (m, v)) in self.adam.m.iter().zip(&self.adam.v).enumerate() {
            if let (Some(m), Some(v)) = (m, v) {
                let m_offset = payload.len() as u64;
                push_f32s(&mut payload, m);
                let v_offset = payload.len() as u64;
                push_f32s(&mut payload, v);
                moments.push(MomentEntry {
                    name: store.get(crate::numerics::ParamId(i)).name.clone(),
                    m_offset,
                    v_offset,
                });
            }
        }
        let adapters = store
            .lora_bindings()
            .map(|(id, b)| AdapterEntry {
                target: store.get(id).name.clone(),
                a: store.get(b.a).name.clone(),
                b: store.get(b.b).name.clone(),
                rank: b.rank,
                alpha: b.alpha,
                merged: b.merged,
            })
            .collect();
        let header = Header {
            stage: self.stage,
            step: self.step,
            model: self.model.config.clone(),
            latent_scale: self.latent_scale,
            vocab_hash: self.vocab_hash.clone(),
            rng: self.rng.clone(),
            train_config: self.train_config.clone(),
            adam_config: self.adam.config,
            adam_steps: self.adam.step_count,
            tensors,
            adapters,
            moments,
            payload_bytes: payload.len() as u64,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        push_u32(&mut out, CHECKPOINT_VERSION);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Corruption {
                offset: 0,
                message: "not a checkpoint (bad magic)".into(),
            });
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let header_len = r.u64("header length")? as usize;
        let header_at = r.offset();
        let header: Header = serde_json::from_slice(r.take(header_len, "header")?).map_err(|e| Error::Corruption {
            offset: header_at,
            message: format!("bad header: {e}"),
        })?;
        let payload_at = r.offset();
        let payload = r.take(header.payload_bytes as usize, "payload")?;
        if r.remaining() != 0 {
            return Err(Error::Corruption {
                offset: r.offset(),
                message: format!("{} trailing bytes", r.remaining()),
            });
        }
        let corrupt = |message: String| Error::Corruption {
            offset: payload_at,
            message,
        };

        header.model.validate()?;
        let mut model = Model::<f32>::new(header.model.clone(), 0)?;
        let store = &mut model.store;
        for a in &header.adapters {
            let target = store.id(&a.target).ok_or_else(|| corrupt(format!("unknown adapter target `{}`", a.target)))?;
            let shape = store.get(target).value.shape().to_vec();
            let ai = store.add(a.a.clone(), Tensor::zeros(&[a.rank, shape[1]]), true)?;
            let bi = store.add(a.b.clone(), Tensor::zeros(&[shape[0], a.rank]), true)?;
            store.insert_lora(
                target,
                LoraBinding {
                    a: ai,
                    b: bi,
                    rank: a.rank,
                    alpha: a.alpha,
                    merged: a.merged,
                },
            )?;
        }
        if store.len() != header.tensors.len() {
            return Err(corrupt(format!(
                "{} tensors stored, model has {}",
                header.tensors.len(),
                store.len()
            )));
        }
        let read_f32 = |offset: u64, n: usize| -> Result<Vec<f32>> {
            let start = offset as usize;
            let end = start + n * 4;
            if end > payload.len() {
                return Err(Error::Corruption {
                    offset: payload_at + offset,
                    message: "tensor runs past the payload".into(),
                });
            }
            ByteReader::new(&payload[start..end]).f32s(n, "tensor")
        };
        for (p, e) in store.iter_mut().zip(&header.tensors) {
            if p.name != e.name || p.value.shape() != e.shape.as_slice() {
                return Err(corrupt(format!("tensor `{}` {:?} does not fit `{}`", e.name, e.shape, p.name)));
            }
            let n = p.value.numel();
            p.value.data_mut().copy_from_slice(&read_f32(e.offset, n)?);
            p.trainable = e.trainable;
        }
        let mut adam = AdamState::new(header.adam_config);
        adam.step_count = header.adam_steps;
        adam.m = vec![None; store.len()];
        adam.v = vec![None; store.len()];
        for e in &header.moments {
            let id = store.id(&e.name).ok_or_else(|| corrupt(format!("moments for unknown `{}`", e.name)))?;
            let n = store.get(id).value.numel();
            adam.m[id.0] = Some(read_f32(e.m_offset, n)?);
            adam.v[id.0] = Some(read_f32(e.v_offset, n)?);
        }
        header.rng.restore()?;
        Ok(Checkpoint {
            stage: header.stage,
            step: header.step,
            model,
            adam,
            latent_scale: header.latent_scale,
            vocab_hash: header.vocab_hash,
            rng: header.rng,
            train_config: header.train_config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
