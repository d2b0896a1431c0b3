use serde::{Deserialize, Serialize};

use super::{DualEncoder, EncoderConfig};
use crate::codec::{push_f32s, push_u32, ByteReader};
use crate::error::{Error, Result};
use crate::networks::Vocab;

pub const EVALUATOR_MAGIC: [u8; 4] = *b"GDEV";
pub const EVALUATOR_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: EncoderConfig,
    vocab: Vec<String>,
    tensors: Vec<TensorEntry>,
}

/// Magic, version, header length, JSON header, then every tensor as f32 in
/// store order.
pub(super) fn to_bytes(enc: &DualEncoder<f32>) -> Vec<u8> {
    let mut payload = Vec::new();
    let mut tensors = Vec::with_capacity(enc.store.len());
    for (_, p) in enc.store.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
        });
        push_f32s(&mut payload, p.value.data());
    }
    let header = Header {
        config: enc.config.clone(),
        vocab: enc.vocab.tokens().to_vec(),
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(&EVALUATOR_MAGIC);
    push_u32(&mut out, EVALUATOR_VERSION);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

pub(super) fn from_bytes(bytes: &[u8]) -> Result<DualEncoder<f32>> {
    let mut r = ByteReader::new(bytes);
    if r.take(4, "magic")? != EVALUATOR_MAGIC {
        return Err(Error::Corruption {
            offset: 0,
            message: "not an evaluator file (bad magic)".into(),
        });
    }
    let version = r.u32("version")?;
    if version != EVALUATOR_VERSION {
        return Err(Error::Version {
            found: version,
            expected: EVALUATOR_VERSION,
        });
    }
    let len = r.u64("header length")? as usize;
    let at = r.offset();
    let header: Header = serde_json::from_slice(r.take(len, "header")?).map_err(|e| Error::Corruption {
        offset: at,
        message: format!("bad header: {e}"),
    })?;
    let vocab = Vocab::from_tokens(header.vocab)?;
    let mut enc = DualEncoder::<f32>::new(header.config, vocab, 0)?;
    if enc.store.len() != header.tensors.len() {
        return Err(Error::Corruption {
            offset: at,
            message: format!("{} tensors stored, encoder has {}", header.tensors.len(), enc.store.len()),
        });
    }
    for (p, e) in enc.store.iter_mut().zip(&header.tensors) {
        if p.name != e.name || p.value.shape() != e.shape.as_slice() {
            return Err(Error::Corruption {
                offset: r.offset(),
                message: format!("tensor `{}` {:?} does not fit `{}`", e.name, e.shape, p.name),
            });
        }
        let n = p.value.numel();
        let data: Vec<f32> = r.f32s(n, "tensor")?;
        p.value.data_mut().copy_from_slice(&data);
    }
    if r.remaining() != 0 {
        return Err(Error::Corruption {
            offset: r.offset(),
            message: format!("{} trailing bytes", r.remaining()),
        });
    }
    Ok(enc)
}
