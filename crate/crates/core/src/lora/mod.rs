//! Low-rank adapters on frozen attention projections.
//!
//! Injection binds a pair `A: [r, d_in]`, `B: [d_out, r]` to a matrix
//! weight `W: [d_out, d_in]`; the layer then computes `x·Wᵀ + (α/r)·(x·Aᵀ)·Bᵀ`.
//! Only adapter tensors stay trainable afterwards.

mod file;

use std::collections::BTreeMap;

use glob::Pattern;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::tensor_checksum;
use crate::error::{Error, Result};
use crate::numerics::{LoraBinding, ParamId, ParamStore, Real, Tensor};

pub use file::{load_adapters, read_adapters, save_adapters, write_adapters, AdapterRecord, ADAPTER_MAGIC, ADAPTER_VERSION};

/// Q, K, V and output projections of every U-Net attention layer.
pub const DEFAULT_TARGETS: [&str; 4] = [
    "unet.*_attn.q.weight",
    "unet.*_attn.k.weight",
    "unet.*_attn.v.weight",
    "unet.*_attn.out.weight",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub targets: Vec<String>,
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            targets: DEFAULT_TARGETS.iter().map(|s| s.to_string()).collect(),
            rank: 4,
            alpha: 4.0,
        }
    }
}

/// One injected adapter, by parameter id.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterRef {
    pub target: ParamId,
    pub target_name: String,
    pub binding: LoraBinding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraState {
    pub adapters: Vec<AdapterRef>,
}

impl LoraState {
    /// Adapters currently bound in `store`, in target order.
    pub fn from_store<T: Real>(store: &ParamStore<T>) -> Self {
        LoraState {
            adapters: store
                .lora_bindings()
                .map(|(target, b)| AdapterRef {
                    target,
                    target_name: store.get(target).name.clone(),
                    binding: *b,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.adapters.iter().map(|a| a.binding.rank).collect()
    }
}

fn adapter_names(target: &str) -> (String, String) {
    let stem = target.strip_suffix(".weight").unwrap_or(target);
    (format!("{stem}.lora_a"), format!("{stem}.lora_b"))
}

/// Names of parameters matched by `patterns`, each pattern required to hit
/// at least one.
pub fn resolve_targets<T: Real>(store: &ParamStore<T>, patterns: &[String]) -> Result<Vec<ParamId>> {
    let mut hits = Vec::new();
    for pat in patterns {
        let p = Pattern::new(pat).map_err(|e| Error::Config(format!("bad target pattern `{pat}`: {e}")))?;
        let matched: Vec<ParamId> = store.iter().filter(|(_, q)| p.matches(&q.name)).map(|(id, _)| id).collect();
        if matched.is_empty() {
            return Err(Error::Target(format!("pattern `{pat}` matches no parameter")));
        }
        hits.extend(matched);
    }
    hits.sort();
    hits.dedup();
    Ok(hits)
}

/// Attaches zero-initialized adapters to every matched weight and freezes
/// everything else.
pub fn inject<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, config: &LoraConfig, rng: &mut R) -> Result<LoraState> {
    if config.rank == 0 || !(config.alpha > 0.0 && config.alpha.is_finite()) {
        return Err(Error::Config(format!(
            "adapter rank {} and alpha {} must both be positive",
            config.rank, config.alpha
        )));
    }
    let targets = resolve_targets(store, &config.targets)?;
    // Validate everything before mutating so a failed injection leaves the
    // store untouched.
    for &id in &targets {
        let p = store.get(id);
        let shape = p.value.shape();
        if shape.len() != 2 {
            return Err(Error::Target(format!("`{}` has shape {shape:?}, not a matrix", p.name)));
        }
        if store.lora_binding(id).is_some() {
            return Err(Error::Duplicate(format!("adapter already attached to `{}`", p.name)));
        }
        if config.rank > shape[0].min(shape[1]) {
            return Err(Error::Config(format!(
                "rank {} exceeds min{shape:?} for `{}`",
                config.rank, p.name
            )));
        }
    }
    store.set_trainable_all(false);
    for &id in &targets {
        let (name, shape) = {
            let p = store.get(id);
            (p.name.clone(), p.value.shape().to_vec())
        };
        let (a_name, b_name) = adapter_names(&name);
        let a = store.add(a_name, Tensor::randn(&[config.rank, shape[1]], 0.02, rng), true)?;
        let b = store.add(b_name, Tensor::zeros(&[shape[0], config.rank]), true)?;
        store.insert_lora(
            id,
            LoraBinding {
                a,
                b,
                rank: config.rank,
                alpha: config.alpha,
                merged: false,
            },
        )?;
    }
    Ok(LoraState::from_store(store))
}

/// Θ/Φ₀ parameter census.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainableReport {
    pub adapters: usize,
    pub theta_count: usize,
    pub phi0_count: usize,
    pub ratio: f64,
}

pub fn trainable_report<T: Real>(store: &ParamStore<T>) -> TrainableReport {
    let mut theta = 0;
    let mut adapters = 0;
    for (_, b) in store.lora_bindings() {
        adapters += 1;
        theta += store.get(b.a).value.numel() + store.get(b.b).value.numel();
    }
    let phi0 = store.numel() - theta;
    TrainableReport {
        adapters,
        theta_count: theta,
        phi0_count: phi0,
        ratio: if phi0 == 0 { 0.0 } else { theta as f64 / phi0 as f64 },
    }
}

/// `ΔW = (α/r)·B·A` as a row-major `[d_out, d_in]` buffer.
pub fn delta_weight<T: Real>(store: &ParamStore<T>, binding: &LoraBinding) -> Vec<T> {
    let a = &store.get(binding.a).value;
    let b = &store.get(binding.b).value;
    let (r, d_in) = (a.shape()[0], a.shape()[1]);
    let d_out = b.shape()[0];
    let s = T::lit(binding.scale());
    let mut out = vec![T::zero(); d_out * d_in];
    for o in 0..d_out {
        for k in 0..r {
            let bk = b.data()[o * r + k] * s;
            for i in 0..d_in {
                out[o * d_in + i] += bk * a.data()[k * d_in + i];
            }
        }
    }
    out
}

fn apply_all<T: Real>(store: &mut ParamStore<T>, merge: bool) -> Result<()> {
    let bindings: Vec<(ParamId, LoraBinding)> = store.lora_bindings().map(|(id, b)| (id, *b)).collect();
    if bindings.is_empty() {
        return Err(Error::State("no adapters injected".into()));
    }
    for (id, b) in &bindings {
        if b.merged == merge {
            let what = if merge { "already merged" } else { "not merged" };
            return Err(Error::State(format!("adapter on `{}` is {what}", store.get(*id).name)));
        }
    }
    for (id, b) in bindings {
        let delta = delta_weight(store, &b);
        let w = store.get_mut(id).value.data_mut();
        for (wi, d) in w.iter_mut().zip(delta) {
            if merge {
                *wi += d;
            } else {
                *wi -= d;
            }
        }
        store.lora_binding_mut(id).expect("binding listed above").merged = merge;
    }
    Ok(())
}

/// Folds every adapter into its base weight in place.
pub fn merge<T: Real>(store: &mut ParamStore<T>) -> Result<()> {
    apply_all(store, true)
}

/// Reverses [`merge`].
pub fn unmerge<T: Real>(store: &mut ParamStore<T>) -> Result<()> {
    apply_all(store, false)
}

/// Per-tensor checksums of the frozen base and of the adapters, taken
/// before fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreezeSnapshot {
    pub frozen: BTreeMap<String, String>,
    pub adapters: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreezeVerdict {
    pub frozen_checked: usize,
    pub adapters_changed: Vec<String>,
}

impl FreezeSnapshot {
    pub fn capture<T: Real>(store: &ParamStore<T>) -> Self {
        let mut adapter_ids = Vec::new();
        for (_, b) in store.lora_bindings() {
            adapter_ids.push(b.a);
            adapter_ids.push(b.b);
        }
        let mut frozen = BTreeMap::new();
        let mut adapters = BTreeMap::new();
        for (id, p) in store.iter() {
            let sum = tensor_checksum(p.value.data());
            if adapter_ids.contains(&id) {
                adapters.insert(p.name.clone(), sum);
            } else {
                frozen.insert(p.name.clone(), sum);
            }
        }
        FreezeSnapshot { frozen, adapters }
    }

    /// Fails on the first base tensor whose checksum moved.
    pub fn verify<T: Real>(&self, store: &ParamStore<T>) -> Result<FreezeVerdict> {
        let now = FreezeSnapshot::capture(store);
        for (name, sum) in &self.frozen {
            match now.frozen.get(name) {
                Some(s) if s == sum => {}
                _ => return Err(Error::FrozenDrift(name.clone())),
            }
        }
        let adapters_changed = self
            .adapters
            .iter()
            .filter(|(name, sum)| now.adapters.get(*name) != Some(sum))
            .map(|(name, _)| name.clone())
            .collect();
        Ok(FreezeVerdict {
            frozen_checked: self.frozen.len(),
            adapters_changed,
        })
    }
}

#[cfg(test)]
mod tests;
