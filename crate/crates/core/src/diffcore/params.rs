use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_LR: f64 = 2e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug)]
struct Slot {
    value: Tensor,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Named trainable tensors plus non-trainable buffers (running statistics,
/// power-iteration vectors).
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Slot>,
    buffers: BTreeMap<String, Tensor>,
    step: u64,
    pub adam: AdamConfig,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let n = value.len();
        self.params.insert(name, Slot { value, m: vec![0.0; n], v: vec![0.0; n] });
        Ok(())
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(Error::Config(format!("duplicate buffer name `{name}`")));
        }
        self.buffers.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).map(|s| &s.value).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params.get_mut(name).map(|s| &mut s.value).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn set_buffer(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self.buffers.get_mut(name).ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape("set_buffer", format!("{name}: {:?} vs {:?}", slot.shape(), value.shape())));
        }
        *slot = value;
        Ok(())
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, s)| (k.as_str(), &s.value))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffers.iter().map(|(k, t)| (k.as_str(), t))
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|s| s.value.len()).sum()
    }

    /// Order-sensitive FNV-1a over names and bit patterns of every tensor.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (name, t) in self.params().chain(self.buffers()) {
            eat(name.as_bytes());
            for v in t.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// One Adam update. Parameters absent from `grads` are left untouched,
    /// moments included.
    pub fn adam_step(&mut self, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let slot = self.params.get(name).ok_or_else(|| Error::UnknownParam(name.clone()))?;
            if slot.value.shape() != g.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("{name}: parameter {:?}, gradient {:?}", slot.value.shape(), g.shape()),
                ));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.adam;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, slot) in &mut self.params {
            let Some(g) = grads.get(name) else { continue };
            let Slot { value, m, v } = slot;
            for (((p, m), v), &g) in value.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads.values().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(p: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(p)).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut s = store_with(0.7);
        let grads = BTreeMap::from([("p".to_string(), Tensor::scalar(0.0))]);
        s.adam_step(&grads, 0.1).unwrap();
        assert_eq!(s.get("p").unwrap().item(), 0.7);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = g, v_hat = g^2 at t = 1, so the step is lr * g / (|g| + eps).
        let mut s = store_with(0.0);
        let grads = BTreeMap::from([("p".to_string(), Tensor::scalar(1.0))]);
        s.adam_step(&grads, 0.1).unwrap();
        assert!((s.get("p").unwrap().item() + 0.1).abs() < 1e-8);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut s = store_with(0.0);
        let grads = BTreeMap::from([("p".to_string(), Tensor::zeros(&[2]))]);
        assert!(matches!(s.adam_step(&grads, 0.1), Err(Error::Shape { .. })));
        assert_eq!(s.step(), 0);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = store_with(0.0);
        assert!(s.insert("p", Tensor::scalar(1.0)).is_err());
        assert!(s.insert_buffer("p", Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn default_learning_rate() {
        assert_eq!(DEFAULT_LR, 0.00002);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = BTreeMap::from([("a".to_string(), Tensor::vector(&[3.0, 4.0]))]);
        let before = clip_global_norm(&mut g, 1.0);
        assert_eq!(before, 5.0);
        assert!((g["a"].norm() - 1.0).abs() < 1e-12);
    }
}
