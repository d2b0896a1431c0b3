use serde::{Deserialize, Serialize};

use super::{ParamStore, Real};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moments per parameter, aligned with store order.
///
/// Moments are allocated lazily for parameters that are trainable when a
/// step runs; frozen parameters never get (or touch) a slot.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub m: Vec<Option<Vec<T>>>,
    pub v: Vec<Option<Vec<T>>>,
    pub step_count: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            m: Vec::new(),
            v: Vec::new(),
            step_count: 0,
        }
    }

    /// One bias-corrected Adam update of every trainable parameter, using
    /// the gradients stored in the parameters' `grad` slots.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        for (_, p) in store.iter() {
            if !p.trainable {
                continue;
            }
            match &p.value.grad {
                None => return Err(Error::State(format!("missing gradient for trainable `{}`", p.name))),
                Some(g) if g.iter().any(|x| !x.is_finite()) => return Err(Error::NonFinite(format!("gradient of `{}`", p.name))),
                Some(_) => {}
            }
        }
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c = self.config;
        let b1 = T::lit(c.beta1);
        let b2 = T::lit(c.beta2);
        let one = T::one();
        let bc1 = T::lit(1.0 - c.beta1.powi(t));
        let bc2 = T::lit(1.0 - c.beta2.powi(t));
        let lr = T::lit(c.lr);
        let eps = T::lit(c.epsilon);
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let n = p.value.numel();
            let m = self.m[i].get_or_insert_with(|| vec![T::zero(); n]);
            let v = self.v[i].get_or_insert_with(|| vec![T::zero(); n]);
            let g = p.value.grad.take().expect("checked above");
            let data = p.value.data_mut();
            for j in 0..n {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn scalar_store(x: f64, trainable: bool) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("x", Tensor::new(&[1], vec![x]).unwrap(), trainable).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_values() {
        let mut store = scalar_store(0.7, true);
        store.iter_mut().next().unwrap().value.grad = Some(vec![0.0]);
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step(&mut store).unwrap();
        assert_eq!(store.get(crate::numerics::ParamId(0)).value.data(), &[0.7]);
        assert_eq!(adam.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        for g in [3.0, -0.25] {
            let mut store = scalar_store(1.0, true);
            store.iter_mut().next().unwrap().value.grad = Some(vec![g]);
            let cfg = AdamConfig { lr: 0.01, ..AdamConfig::default() };
            let mut adam = AdamState::new(cfg);
            adam.step(&mut store).unwrap();
            let moved = store.get(crate::numerics::ParamId(0)).value.data()[0] - 1.0;
            assert!((moved + 0.01 * f64::signum(g)).abs() <= 0.01 * 1e-6, "{moved}");
        }
    }

    #[test]
    fn frozen_parameters_are_untouched() {
        let mut store = scalar_store(0.5, false);
        store.add("y", Tensor::new(&[1], vec![2.0]).unwrap(), true).unwrap();
        store.iter_mut().nth(1).unwrap().value.grad = Some(vec![1.0]);
        let before = store.get(crate::numerics::ParamId(0)).value.data()[0].to_bits();
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step(&mut store).unwrap();
        assert_eq!(store.get(crate::numerics::ParamId(0)).value.data()[0].to_bits(), before);
        assert!(adam.m[0].is_none());
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut store = scalar_store(0.5, true);
        store.iter_mut().next().unwrap().value.grad = Some(vec![f64::NAN]);
        let mut adam = AdamState::new(AdamConfig::default());
        let err = adam.step(&mut store).unwrap_err();
        assert!(err.to_string().contains("`x`"), "{err}");
        assert_eq!(adam.step_count, 0);
    }
}
