//! Named parameter tensors, per-parameter gradient accumulators, and Adam.
//!
//! Parameters belong to dot-separated groups ("dec.block0.w"); freezing is
//! done per entry, usually via a group prefix. Frozen entries never receive
//! gradient accumulation, so their values and optimizer state stay bitwise
//! unchanged across training.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor2;

#[derive(Clone, Debug)]
struct ParamEntry {
    value: Tensor2,
    grad: Tensor2,
    trainable: bool,
    m: Tensor2,
    v: Tensor2,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// 0 disables the schedule; otherwise lr is scaled by
    /// min(t / warmup, sqrt(warmup / t)) — linear warmup into an inverse
    /// square-root decay.
    pub warmup_steps: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 0,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }

    pub fn effective_lr(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            return self.lr;
        }
        let t = step.max(1) as f64;
        let w = self.warmup_steps as f64;
        self.lr * (t / w).min((w / t).sqrt())
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
    step: usize,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor2) {
        let (r, c) = value.shape();
        self.entries.insert(
            name.into(),
            ParamEntry {
                value,
                grad: Tensor2::zeros(r, c),
                trainable: true,
                m: Tensor2::zeros(r, c),
                v: Tensor2::zeros(r, c),
            },
        );
    }

    pub fn remove(&mut self, name: &str) {
        self.entries.remove(name);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn value(&self, name: &str) -> Result<&Tensor2> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::Argument(format!("unknown parameter `{name}`")))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor2> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| Error::Argument(format!("unknown parameter `{name}`")))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor2> {
        self.entries
            .get(name)
            .map(|e| &e.grad)
            .ok_or_else(|| Error::Argument(format!("unknown parameter `{name}`")))
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).map_or(false, |e| e.trainable)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) {
        if let Some(e) = self.entries.get_mut(name) {
            e.trainable = trainable;
        }
    }

    /// Set the trainable flag for every parameter whose name starts with
    /// `prefix`. Returns how many entries matched.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for (name, e) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                e.trainable = trainable;
                n += 1;
            }
        }
        n
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for e in self.entries.values_mut() {
            e.trainable = trainable;
        }
    }

    /// Add `g` into the gradient accumulator. Frozen entries accumulate
    /// nothing, which is what keeps them bitwise stable under Adam.
    pub fn accumulate(&mut self, name: &str, g: &Tensor2) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Argument(format!("unknown parameter `{name}`")))?;
        if !e.trainable {
            return Ok(());
        }
        if e.grad.shape() != g.shape() {
            return Err(Error::dimension(
                "accumulate",
                format!("{:?}", e.grad.shape()),
                format!("{:?}", g.shape()),
            ));
        }
        e.grad.add_scaled(g, 1.0)
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.fill(0.0);
        }
    }

    /// Scale accumulated gradients (e.g. by 1/batch) then take one Adam step
    /// on the trainable entries. Step count advances once per call.
    pub fn adam_step(&mut self, cfg: &AdamConfig, grad_scale: f64) -> Result<()> {
        self.step += 1;
        let t = self.step;
        let lr = cfg.effective_lr(t);
        let bc1 = 1.0 - cfg.beta1.powi(t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(t as i32);
        for (name, e) in self.entries.iter_mut() {
            if !e.trainable {
                continue;
            }
            for i in 0..e.value.len() {
                let g = e.grad.data()[i] * grad_scale;
                if !g.is_finite() {
                    return Err(Error::NonFinite {
                        step: t,
                        what: format!("gradient of `{name}`"),
                    });
                }
                let m = cfg.beta1 * e.m.data()[i] + (1.0 - cfg.beta1) * g;
                let v = cfg.beta2 * e.v.data()[i] + (1.0 - cfg.beta2) * g * g;
                e.m.data_mut()[i] = m;
                e.v.data_mut()[i] = v;
                let mhat = m / bc1;
                let vhat = v / bc2;
                e.value.data_mut()[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    pub fn reset_optimizer(&mut self) {
        self.step = 0;
        for e in self.entries.values_mut() {
            e.m.fill(0.0);
            e.v.fill(0.0);
            e.grad.fill(0.0);
        }
    }

    pub fn optimizer_step_count(&self) -> usize {
        self.step
    }

    /// Stable content hash of parameter names, shapes, trainable flags and
    /// exact value bits. Optimizer state is excluded.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, e) in &self.entries {
            h.update(name.as_bytes());
            h.update([0u8, e.trainable as u8]);
            h.update((e.value.rows() as u64).to_le_bytes());
            h.update((e.value.cols() as u64).to_le_bytes());
            for x in e.value.data() {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Hash restricted to names under a prefix (freeze-contract audits).
    pub fn content_hash_prefix(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (name, e) in &self.entries {
            if !name.starts_with(prefix) {
                continue;
            }
            h.update(name.as_bytes());
            h.update((e.value.rows() as u64).to_le_bytes());
            h.update((e.value.cols() as u64).to_le_bytes());
            for x in e.value.data() {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Iterate (name, value, trainable) in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor2, bool)> {
        self.entries
            .iter()
            .map(|(n, e)| (n.as_str(), &e.value, e.trainable))
    }
}

/// Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
pub fn init_uniform(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor2 {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor2::new(rows, cols, data).expect("sized by construction")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn frozen_entries_accumulate_zero_and_never_move() {
        let mut store = ParamStore::new();
        store.insert("a.w", Tensor2::filled(2, 2, 1.0));
        store.insert("b.w", Tensor2::filled(2, 2, 1.0));
        store.set_trainable_prefix("b.", false);
        let g = Tensor2::filled(2, 2, 0.5);
        store.accumulate("a.w", &g).unwrap();
        store.accumulate("b.w", &g).unwrap();
        assert_eq!(store.grad("b.w").unwrap().data(), &[0.0; 4]);
        let before = store.value("b.w").unwrap().clone();
        store.adam_step(&AdamConfig::default(), 1.0).unwrap();
        assert_eq!(store.value("b.w").unwrap(), &before);
        assert_ne!(store.value("a.w").unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        // minimize ||theta||^2/2; gradient = theta
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        store.insert("theta", init_uniform(&mut rng, 4, 4, 1));
        let cfg = AdamConfig::with_lr(0.05);
        for _ in 0..400 {
            store.zero_grads();
            let g = store.value("theta").unwrap().clone();
            store.accumulate("theta", &g).unwrap();
            store.adam_step(&cfg, 1.0).unwrap();
        }
        let norm: f64 = store
            .value("theta")
            .unwrap()
            .data()
            .iter()
            .map(|x| x * x)
            .sum();
        assert!(norm < 1e-6, "norm {norm}");
    }

    #[test]
    fn warmup_schedule_shape() {
        let cfg = AdamConfig {
            warmup_steps: 100,
            ..AdamConfig::with_lr(1.0)
        };
        assert!((cfg.effective_lr(50) - 0.5).abs() < 1e-12);
        assert!((cfg.effective_lr(100) - 1.0).abs() < 1e-12);
        assert!((cfg.effective_lr(400) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn content_hash_tracks_value_bits() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor2::filled(1, 2, 1.0));
        let h1 = store.content_hash();
        store.value_mut("x").unwrap().data_mut()[0] = 1.0 + f64::EPSILON;
        let h2 = store.content_hash();
        assert_ne!(h1, h2);
    }
}
