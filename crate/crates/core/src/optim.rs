//! Named parameter store with bias-corrected Adam.
//!
//! Parameters are immutable tensor snapshots: a step never mutates data in
//! place, it swaps in fresh leaves. Models re-fetch their parameters by name
//! when building each step's graph. BTreeMap keeps iteration order (and with
//! it every downstream float reduction) deterministic.

use std::collections::BTreeMap;

use crate::tensor::{Gradients, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
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
}

struct Slot {
    tensor: Tensor,
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Default)]
pub struct ParamStore {
    slots: BTreeMap<String, Slot>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter. The tensor is re-wrapped as a tracked leaf so a
    /// caller can hand in constants (e.g. loaded from a checkpoint).
    pub fn insert(&mut self, name: &str, t: Tensor) {
        let n = t.len();
        let leaf = Tensor::var(t.rows(), t.cols(), t.to_vec());
        self.slots.insert(
            name.to_string(),
            Slot {
                tensor: leaf,
                m: vec![0.0; n],
                v: vec![0.0; n],
            },
        );
    }

    /// Register a frozen parameter: an untracked constant the backward pass
    /// skips and `adam_step` never touches. Used for teacher networks whose
    /// weights must stay fixed while gradients still flow through their
    /// inputs.
    pub fn insert_constant(&mut self, name: &str, t: Tensor) {
        let leaf = Tensor::constant(t.rows(), t.cols(), t.to_vec());
        self.slots.insert(
            name.to_string(),
            Slot {
                tensor: leaf,
                m: Vec::new(),
                v: Vec::new(),
            },
        );
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self
            .slots
            .get(name)
            .unwrap_or_else(|| panic!("no parameter named {name:?}"))
            .tensor
    }

    pub fn contains(&self, name: &str) -> bool {
        self.slots.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(|s| s.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.slots.values().map(|s| &s.tensor)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.slots.iter().map(|(k, s)| (k.as_str(), &s.tensor))
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn param_count(&self) -> usize {
        self.slots.values().map(|s| s.tensor.len()).sum()
    }

    /// l2 norm of the gradient over all stored parameters.
    pub fn grad_norm(&self, grads: &Gradients) -> f64 {
        grads.global_norm(self.tensors())
    }

    /// One bias-corrected Adam update. Parameters without a gradient in
    /// `grads` keep their value and moments untouched.
    pub fn adam_step(&mut self, grads: &Gradients, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for slot in self.slots.values_mut() {
            let g = match grads.wrt(&slot.tensor) {
                Some(g) => g,
                None => continue,
            };
            assert_eq!(
                g.len(),
                slot.tensor.len(),
                "gradient/parameter shape mismatch"
            );
            let mut data = slot.tensor.to_vec();
            for i in 0..data.len() {
                slot.m[i] = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * g[i];
                slot.v[i] = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                data[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
            slot.tensor = Tensor::var(slot.tensor.rows(), slot.tensor.cols(), data);
        }
    }
}
