//! Named parameter storage, gradient accumulation, Adam, and parameter
//! hashing for the stage freeze audits.

use alloc::string::String;
use alloc::vec::Vec;

use sha2::{Digest, Sha256};

use crate::math;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// All trainable arrays of a model, addressed by stable names.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// SHA-256 over the little-endian bytes of one parameter.
    pub fn hash_param(&self, id: ParamId) -> [u8; 32] {
        let t = &self.values[id.0];
        let mut h = Sha256::new();
        h.update((t.rows as u64).to_le_bytes());
        h.update((t.cols as u64).to_le_bytes());
        for v in &t.data {
            h.update(v.to_le_bytes());
        }
        h.finalize().into()
    }

    /// Per-parameter hashes in declaration order, paired with names.
    /// Used by the freeze audits to prove which arrays a stage touched.
    pub fn hash_all(&self) -> Vec<(String, [u8; 32])> {
        self.ids()
            .map(|id| (self.names[id.0].clone(), self.hash_param(id)))
            .collect()
    }
}

/// Gradient buffers aligned with a `ParamStore`.
#[derive(Debug, Clone)]
pub struct GradStore {
    grads: Vec<Option<Tensor>>,
}

impl GradStore {
    pub fn for_store(store: &ParamStore) -> Self {
        GradStore { grads: alloc::vec![None; store.len()] }
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &Tensor) {
        match &mut self.grads[id.0] {
            Some(g) => g.add_assign(grad),
            slot => *slot = Some(grad.clone()),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn clear(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }
}

/// Adam over an explicit subset of parameters; everything outside the
/// subset is frozen by construction.
pub struct Adam {
    targets: Vec<ParamId>,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, targets: Vec<ParamId>) -> Self {
        let m = targets
            .iter()
            .map(|id| Tensor::zeros(store.get(*id).rows, store.get(*id).cols))
            .collect();
        let v = targets
            .iter()
            .map(|id| Tensor::zeros(store.get(*id).rows, store.get(*id).cols))
            .collect();
        Adam { targets, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m, v }
    }

    pub fn targets(&self) -> &[ParamId] {
        &self.targets
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradStore, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - math::powi(self.beta1, self.step as i32);
        let bc2 = 1.0 - math::powi(self.beta2, self.step as i32);
        for (slot, id) in self.targets.iter().enumerate() {
            let Some(g) = grads.get(*id) else { continue };
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            let p = store.get_mut(*id);
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                p.data[i] -= lr * mhat / (math::sqrt(vhat) + self.eps);
            }
        }
    }
}
