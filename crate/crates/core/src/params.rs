//! Named parameter registry, initialisation, and the optimiser.

use std::collections::BTreeMap;

use autodiff::{Gradients, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};

/// Role of a tensor in the training pipeline. Decides which phase may
/// update it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
pub enum ParamLabel {
    /// Student weights learned during distillation.
    Body,
    /// Low-rank adapter matrices of the policy head.
    Lora,
    /// Policy-head base weight; never updated.
    FrozenBase,
    Critic,
    PolicyStd,
    /// Student-to-teacher feature projection used only by the feature loss.
    Adapter,
    Teacher,
}

impl ParamLabel {
    pub fn code(self) -> u8 {
        match self {
            ParamLabel::Body => 0,
            ParamLabel::Lora => 1,
            ParamLabel::FrozenBase => 2,
            ParamLabel::Critic => 3,
            ParamLabel::PolicyStd => 4,
            ParamLabel::Adapter => 5,
            ParamLabel::Teacher => 6,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => ParamLabel::Body,
            1 => ParamLabel::Lora,
            2 => ParamLabel::FrozenBase,
            3 => ParamLabel::Critic,
            4 => ParamLabel::PolicyStd,
            5 => ParamLabel::Adapter,
            6 => ParamLabel::Teacher,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub label: ParamLabel,
}

/// Ordered name → tensor map. Iteration order is lexicographic so
/// checkpoints and optimiser sweeps are deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, label: ParamLabel) {
        self.params.insert(name.into(), Param { value, label });
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn tensor(&self, name: &str) -> &Tensor {
        &self.params.get(name).unwrap_or_else(|| panic!("unknown parameter `{name}`")).value
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count over tensors whose label passes `filter`.
    pub fn count(&self, filter: impl Fn(ParamLabel) -> bool) -> usize {
        self.params.values().filter(|p| filter(p.label)).map(|p| p.value.len()).sum()
    }

    /// Moves every parameter of `other` into `self`.
    pub fn extend(&mut self, other: ParamStore) {
        self.params.extend(other.params);
    }

    /// Subset whose names start with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Registers every parameter as a tape leaf. Parameters passing
    /// `trainable` require gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(ParamLabel) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| (name.clone(), tape.leaf(p.value.clone(), trainable(p.label))))
            .collect();
        Bound { vars }
    }

    /// SHA-256 over names, labels and values of parameters passing `filter`.
    pub fn digest(&self, filter: impl Fn(ParamLabel) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.params.iter().filter(|(_, p)| filter(p.label)) {
            h.update(name.as_bytes());
            h.update([p.label.code()]);
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Parameters registered on one tape.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Binding from explicit tape variables, e.g. gradient-check leaves.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self { vars: vars.into_iter().collect() }
    }

    pub fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    /// Pulls the gradient of every bound parameter out of `grads`.
    pub fn collect(&self, tape: &Tape, grads: &mut Gradients) -> ParamGrads {
        let mut out = ParamGrads::default();
        for (name, &v) in &self.vars {
            if tape.requires_grad(v) {
                if let Some(g) = grads.take(v) {
                    out.0.insert(name.clone(), g);
                }
            }
        }
        out
    }
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct ParamGrads(pub BTreeMap<String, Tensor>);

impl ParamGrads {
    pub fn global_norm(&self) -> f64 {
        self.0.values().map(|g| g.norm_sq()).sum::<f64>().sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`. Returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for g in self.0.values_mut() {
                for v in g.data_mut() {
                    *v *= s;
                }
            }
        }
        norm
    }

    pub fn accumulate(&mut self, other: ParamGrads) {
        for (k, g) in other.0 {
            match self.0.get_mut(&k) {
                Some(acc) => acc.add_scaled(&g, 1.0),
                None => {
                    self.0.insert(k, g);
                }
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.0.values().all(|g| g.all_finite())
    }
}

/// Parameter initialisers driven by a seeded generator.
pub struct Init<'a> {
    rng: &'a mut ChaCha8Rng,
}

impl<'a> Init<'a> {
    pub fn new(rng: &'a mut ChaCha8Rng) -> Self {
        Self { rng }
    }

    /// Glorot-uniform for a `[fan_in, fan_out]` weight.
    pub fn xavier(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Tensor::from_fn(&[fan_in, fan_out], |_| self.rng.gen_range(-a..a))
    }

    pub fn uniform(&mut self, shape: &[usize], a: f64) -> Tensor {
        Tensor::from_fn(shape, |_| self.rng.gen_range(-a..a))
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Tensor {
        Tensor::zeros(shape)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// Adaptive moment estimation with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self { cfg, step: 0, moments: BTreeMap::new() }
    }

    /// Applies `grads` to `store`. Every gradient must name a registered
    /// parameter.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (name, g) in &grads.0 {
            let p = store
                .tensor_mut(name)
                .ok_or_else(|| CoreError::Registry(format!("gradient for unregistered parameter `{name}`")))?;
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
            for i in 0..g.len() {
                let gi = g.data()[i];
                let mi = b1 * m.data()[i] + (1.0 - b1) * gi;
                let vi = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let w = &mut p.data_mut()[i];
                *w -= lr * self.cfg.weight_decay * *w;
                *w -= lr * (mi / bc1) / ((vi / bc2).sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}

/// Cosine decay from `lr_max` to `lr_min` over `total` steps.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total <= 1 {
        return lr_max;
    }
    let p = (step.min(total - 1)) as f64 / (total - 1) as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * p).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn clip_bounds_global_norm() {
        let mut g = ParamGrads::default();
        g.0.insert("a".into(), Tensor::from_vec(vec![3.0, 4.0]));
        g.0.insert("b".into(), Tensor::from_vec(vec![12.0]));
        let before = g.clip_global_norm(1.0);
        assert!((before - 13.0).abs() < 1e-12);
        assert!(g.global_norm() <= 1.0 + 1e-6);
    }

    #[test]
    fn clip_leaves_small_gradients() {
        let mut g = ParamGrads::default();
        g.0.insert("a".into(), Tensor::from_vec(vec![0.3, 0.4]));
        g.clip_global_norm(1.0);
        assert_eq!(g.0["a"].data(), &[0.3, 0.4]);
    }

    #[test]
    fn cosine_endpoints() {
        assert!((cosine_lr(0, 10, 3e-4, 1e-5) - 3e-4).abs() < 1e-15);
        assert!((cosine_lr(9, 10, 3e-4, 1e-5) - 1e-5).abs() < 1e-15);
    }

    #[test]
    fn adamw_rejects_unknown_parameter() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(&[2]), ParamLabel::Body);
        let mut g = ParamGrads::default();
        g.0.insert("ghost".into(), Tensor::zeros(&[2]));
        let mut opt = AdamW::new(AdamWConfig::default());
        assert!(matches!(opt.step(&mut store, &g, 1e-3), Err(CoreError::Registry(_))));
    }

    #[test]
    fn adamw_descends_quadratic() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_vec(vec![2.0, -3.0]), ParamLabel::Body);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
        for _ in 0..500 {
            let mut tape = Tape::new();
            let b = store.bind(&mut tape, |_| true);
            let w = b.var("w");
            let sq = tape.mul(w, w).unwrap();
            let l = tape.sum_all(sq);
            let mut g = tape.backward(l).unwrap();
            let pg = b.collect(&tape, &mut g);
            opt.step(&mut store, &pg, 0.05).unwrap();
        }
        assert!(store.tensor("w").norm_sq() < 1e-3);
    }

    #[test]
    fn digest_changes_with_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut init = Init::new(&mut rng);
        let mut s = ParamStore::new();
        s.insert("a", init.xavier(3, 3), ParamLabel::Body);
        let d0 = s.digest(|_| true);
        s.tensor_mut("a").unwrap().data_mut()[0] += 1e-9;
        assert_ne!(d0, s.digest(|_| true));
    }
}
