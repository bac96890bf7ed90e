use std::collections::BTreeMap;

use super::{Gradients, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
struct Slot<T> {
    value: Tensor<T>,
    m: Tensor<T>,
    v: Tensor<T>,
}

/// Named parameters with their Adam moment estimates, in name order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    slots: BTreeMap<String, Slot<T>>,
    step: u64,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { slots: BTreeMap::new(), step: 0 }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.slots.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        let m = Tensor::zeros(value.shape());
        let v = Tensor::zeros(value.shape());
        self.slots.insert(name, Slot { value, m, v });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.slots.get(name).map(|s| &s.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.slots.get_mut(name).map(|s| &mut s.value)
    }

    pub fn moments(&self, name: &str) -> Option<(&Tensor<T>, &Tensor<T>)> {
        self.slots.get(name).map(|s| (&s.m, &s.v))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.slots.iter().map(|(k, s)| (k, &s.value))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.slots.keys()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.slots.values().map(|s| s.value.numel()).sum()
    }

    /// Bias-corrected Adam update for every parameter that has a gradient.
    /// Parameters absent from `grads` are left untouched.
    pub fn adam_step(&mut self, grads: &Gradients<T>, cfg: &AdamConfig) -> Result<()> {
        for (name, g) in grads.iter() {
            let slot = self.slots.get(name).ok_or_else(|| Error::UnknownParam(name.clone()))?;
            if slot.value.shape() != g.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("`{name}`: parameter {:?}, gradient {:?}", slot.value.shape(), g.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient { name: name.clone() });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let (one, lr, eps) = (T::one(), T::lit(cfg.lr), T::lit(cfg.eps));
        let bc1 = one - b1.powi(t);
        let bc2 = one - b2.powi(t);
        for (name, g) in grads.iter() {
            let slot = self.slots.get_mut(name).expect("validated above");
            let Slot { value, m, v } = slot;
            for (((p, mi), vi), &gi) in value
                .data_mut()
                .iter_mut()
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
                .zip(g.data())
            {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Converts parameter values to another precision; moments restart at zero.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, s) in &self.slots {
            out.insert(name.clone(), s.value.cast()).expect("names are unique");
        }
        out
    }

    /// Drops optimizer state.
    pub fn reset_moments(&mut self) {
        for s in self.slots.values_mut() {
            s.m = Tensor::zeros(s.value.shape());
            s.v = Tensor::zeros(s.value.shape());
        }
        self.step = 0;
    }

    /// CRC-32 of the parameters as little-endian 32-bit floats in name order:
    /// the same bytes a checkpoint payload holds.
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for s in self.slots.values() {
            for &x in s.value.data() {
                h.update(&(x.as_f64() as f32).to_le_bytes());
            }
        }
        h.finalize()
    }
}
