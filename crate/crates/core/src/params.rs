//! Named parameter storage, gradient buffers, and the Adam optimizer.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Flat, insertion-ordered collection of named parameter tensors.
///
/// Names are hierarchical (`"captioner.visual.enc.0.w"`) and unique.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    #[serde(skip)]
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on duplicate names; model construction code owns the namespace.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Rebuilds the name index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), ParamId(i)))
            .collect();
    }

    /// Copies values from `other` for every name both stores share with equal shapes.
    /// Returns the number of tensors copied.
    pub fn load_matching(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for (name, tensor) in other.iter() {
            if let Some(id) = self.id(name) {
                if self.tensors[id.0].shape() == tensor.shape() {
                    self.tensors[id.0] = tensor.clone();
                    copied += 1;
                }
            }
        }
        copied
    }
}

/// Glorot-uniform initialized `rows×cols` weight.
pub fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Tensor::from_vec(rows, cols, data)
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    Tensor::from_vec(rows, cols, data)
}

/// Per-parameter gradient buffers, aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn new(num_params: usize) -> Self {
        Self {
            grads: vec![None; num_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor) {
        if id.0 >= self.grads.len() {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    /// Adds `other` into `self` in parameter order.
    pub fn merge(&mut self, other: &Gradients) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_assign(k);
        }
    }

    pub fn norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(Tensor::norm_sq)
            .sum::<f64>()
            .sqrt()
    }

    /// Gradient norm restricted to parameters whose names start with `prefix`.
    pub fn norm_with_prefix(&self, store: &ParamStore, prefix: &str) -> f64 {
        self.grads
            .iter()
            .enumerate()
            .filter(|(i, _)| store.name(ParamId(*i)).starts_with(prefix))
            .filter_map(|(_, g)| g.as_ref())
            .map(Tensor::norm_sq)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::is_finite)
    }

    /// Rescales so the global norm is at most `max_norm`.
    pub fn clip_norm(&mut self, max_norm: f64) {
        let n = self.norm();
        if n > max_norm && n.is_finite() {
            self.scale(max_norm / n);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are lazily shaped to the store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .ids()
            .map(|id| {
                let (r, c) = store.get(id).shape();
                Tensor::zeros(r, c)
            })
            .collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn apply(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        if lr == 0.0 {
            return;
        }
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for id in store.ids() {
            let Some(g) = grads.get(id) else { continue };
            let m = self.m[id.0].data_mut();
            for (mi, gi) in m.iter_mut().zip(g.data()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
            }
            let v = self.v[id.0].data_mut();
            for (vi, gi) in v.iter_mut().zip(g.data()) {
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            }
            let (m, v) = (&self.m[id.0], &self.v[id.0]);
            let p = store.get_mut(id).data_mut();
            for ((pi, mi), vi) in p.iter_mut().zip(m.data()).zip(v.data()) {
                *pi -= lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
            }
        }
    }
}
