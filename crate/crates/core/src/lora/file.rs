use std::fs;
use std::path::Path;

use crate::codec::{push_f32s, push_f64, push_u32, ByteReader};
use crate::error::{Error, Result};
use crate::numerics::{LoraBinding, ParamStore, Real, Tensor};

pub const ADAPTER_MAGIC: [u8; 4] = *b"GLRA";
pub const ADAPTER_VERSION: u32 = 1;

/// One adapter as stored on disk, detached from any parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterRecord {
    pub target_name: String,
    pub rank: usize,
    pub alpha: f64,
    pub d_in: usize,
    pub d_out: usize,
    /// `[rank, d_in]`, row-major.
    pub a: Vec<f32>,
    /// `[d_out, rank]`, row-major.
    pub b: Vec<f32>,
}

/// Serializes adapter records: magic, version, count, then per adapter the
/// name, `r`, `alpha`, `d_in`, `d_out` and the f32 payloads of A and B.
pub fn write_adapters(records: &[AdapterRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&ADAPTER_MAGIC);
    push_u32(&mut out, ADAPTER_VERSION);
    push_u32(&mut out, records.len() as u32);
    for r in records {
        push_u32(&mut out, r.target_name.len() as u32);
        out.extend_from_slice(r.target_name.as_bytes());
        push_u32(&mut out, r.rank as u32);
        push_f64(&mut out, r.alpha);
        push_u32(&mut out, r.d_in as u32);
        push_u32(&mut out, r.d_out as u32);
        push_f32s(&mut out, &r.a);
        push_f32s(&mut out, &r.b);
    }
    out
}

pub fn read_adapters(bytes: &[u8]) -> Result<Vec<AdapterRecord>> {
    let mut r = ByteReader::new(bytes);
    if r.take(4, "magic")? != ADAPTER_MAGIC {
        return Err(Error::Corruption {
            offset: 0,
            message: "not an adapter file (bad magic)".into(),
        });
    }
    let version = r.u32("version")?;
    if version != ADAPTER_VERSION {
        return Err(Error::Version {
            found: version,
            expected: ADAPTER_VERSION,
        });
    }
    let count = r.u32("adapter count")? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let at = r.offset();
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Corruption {
                offset: at,
                message: "adapter name is not UTF-8".into(),
            })?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let alpha = r.f64("alpha")?;
        let d_in = r.u32("d_in")? as usize;
        let d_out = r.u32("d_out")? as usize;
        let a = r.f32s(rank * d_in, "A")?;
        let b = r.f32s(d_out * rank, "B")?;
        out.push(AdapterRecord {
            target_name: name,
            rank,
            alpha,
            d_in,
            d_out,
            a,
            b,
        });
    }
    if r.remaining() != 0 {
        return Err(Error::Corruption {
            offset: r.offset(),
            message: format!("{} trailing bytes", r.remaining()),
        });
    }
    Ok(out)
}

/// Writes every adapter bound in `store`.
pub fn save_adapters<T: Real>(path: &Path, store: &ParamStore<T>) -> Result<()> {
    let records: Vec<AdapterRecord> = store
        .lora_bindings()
        .map(|(id, b)| {
            let w = store.get(id);
            AdapterRecord {
                target_name: w.name.clone(),
                rank: b.rank,
                alpha: b.alpha,
                d_in: w.value.shape()[1],
                d_out: w.value.shape()[0],
                a: store.get(b.a).value.data().iter().map(|v| v.as_f64() as f32).collect(),
                b: store.get(b.b).value.data().iter().map(|v| v.as_f64() as f32).collect(),
            }
        })
        .collect();
    fs::write(path, write_adapters(&records)).map_err(|e| Error::io(path, e))
}

/// Binds adapters from `path` onto a base store (unmerged, trainable
/// adapters, frozen base).
pub fn load_adapters<T: Real>(path: &Path, store: &mut ParamStore<T>) -> Result<usize> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let records = read_adapters(&bytes)?;
    for r in &records {
        let id = store
            .id(&r.target_name)
            .ok_or_else(|| Error::Target(format!("adapter target `{}` not in model", r.target_name)))?;
        let shape = store.get(id).value.shape();
        if shape != [r.d_out, r.d_in] {
            return Err(Error::dim("load_adapters", shape, &[r.d_out, r.d_in]));
        }
        if store.lora_binding(id).is_some() {
            return Err(Error::Duplicate(format!("adapter already attached to `{}`", r.target_name)));
        }
    }
    store.set_trainable_all(false);
    for r in &records {
        let id = store.id(&r.target_name).expect("checked above");
        let stem = r.target_name.strip_suffix(".weight").unwrap_or(&r.target_name);
        let a = Tensor::from_f64(&[r.rank, r.d_in], &r.a.iter().map(|&v| v as f64).collect::<Vec<_>>())?;
        let b = Tensor::from_f64(&[r.d_out, r.rank], &r.b.iter().map(|&v| v as f64).collect::<Vec<_>>())?;
        let a = store.add(format!("{stem}.lora_a"), a, true)?;
        let b = store.add(format!("{stem}.lora_b"), b, true)?;
        store.insert_lora(
            id,
            LoraBinding {
                a,
                b,
                rank: r.rank,
                alpha: r.alpha,
                merged: false,
            },
        )?;
    }
    Ok(records.len())
}
