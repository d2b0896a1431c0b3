use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Low-rank adapter wired onto a frozen matrix weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoraBinding {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
    pub merged: bool,
}

impl LoraBinding {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Named parameters of one model, in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
    lora: BTreeMap<ParamId, LoraBinding>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
            lora: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Duplicate(format!("parameter `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            trainable,
        });
        Ok(id)
    }

    /// Registers a normal(0, 0.02) initialized weight.
    pub fn add_normal<R: Rng + ?Sized>(&mut self, name: impl Into<String>, shape: &[usize], rng: &mut R) -> Result<ParamId> {
        self.add(name, Tensor::randn(shape, 0.02, rng), true)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape), true)
    }

    pub fn add_ones(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::full(shape, T::one()), true)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn set_trainable_all(&mut self, flag: bool) {
        for p in &mut self.params {
            p.trainable = flag;
        }
    }

    /// Marks every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, flag: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.trainable = flag;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.value.grad = None;
        }
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn lora_binding(&self, weight: ParamId) -> Option<&LoraBinding> {
        self.lora.get(&weight)
    }

    pub fn lora_bindings(&self) -> impl Iterator<Item = (ParamId, &LoraBinding)> {
        self.lora.iter().map(|(k, v)| (*k, v))
    }

    pub(crate) fn insert_lora(&mut self, weight: ParamId, binding: LoraBinding) -> Result<()> {
        if self.lora.contains_key(&weight) {
            return Err(Error::Duplicate(format!(
                "adapter already attached to `{}`",
                self.get(weight).name
            )));
        }
        self.lora.insert(weight, binding);
        Ok(())
    }

    pub(crate) fn lora_binding_mut(&mut self, weight: ParamId) -> Option<&mut LoraBinding> {
        self.lora.get_mut(&weight)
    }

    /// Copies values by name from `other`; shapes must agree.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .by_name(&p.name)
                .ok_or_else(|| Error::State(format!("missing parameter `{}`", p.name)))?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::dim("copy_values_from", p.value.shape(), src.value.shape()));
            }
            p.value.data_mut().copy_from_slice(src.value.data());
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
            lora: self.lora.clone(),
        }
    }
}
