use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Named parameter arrays in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name, value, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Number of scalar values, optionally counting only trainable ones.
    pub fn scalar_count(&self, trainable_only: bool) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable || !trainable_only)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.is_finite())
    }

    pub fn to_records(&self) -> Vec<ParamRecord> {
        self.entries
            .iter()
            .map(|e| ParamRecord {
                name: e.name.clone(),
                shape: [e.value.rows, e.value.cols],
                values: e.value.data.clone(),
            })
            .collect()
    }

    /// Overwrites values from `records`. Names, order and shapes must match exactly.
    pub fn load_records(&mut self, records: &[ParamRecord]) -> Result<()> {
        if records.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter arrays, found {}",
                self.entries.len(),
                records.len()
            )));
        }
        for (e, r) in self.entries.iter().zip(records) {
            if e.name != r.name {
                return Err(Error::Checkpoint(format!(
                    "parameter name mismatch: expected {}, found {}",
                    e.name, r.name
                )));
            }
            let shape = [e.value.rows, e.value.cols];
            if shape != r.shape || r.values.len() != shape[0] * shape[1] {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {}: expected {:?}, found {:?} with {} values",
                    e.name,
                    shape,
                    r.shape,
                    r.values.len()
                )));
            }
            if r.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Checkpoint(format!("non-finite value in {}", e.name)));
            }
        }
        for (e, r) in self.entries.iter_mut().zip(records) {
            e.value.data.copy_from_slice(&r.values);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct ParamGrads {
    grads: Vec<Tensor>,
}

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store
                .entries
                .iter()
                .map(|e| Tensor::zeros(e.value.rows, e.value.cols))
                .collect(),
        }
    }

    pub fn add(&mut self, id: ParamId, g: &Tensor) {
        self.grads[id.0].add_assign(g);
    }

    pub fn merge(&mut self, other: &ParamGrads) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            for v in &mut g.data {
                *v *= s;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().map(|g| g.sum_sq()).sum::<f64>().sqrt()
    }

    /// Rescales so the global norm does not exceed `max_norm`. Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let n = self.global_norm();
        if n > max_norm && n > 0.0 {
            self.scale(max_norm / n);
        }
        n
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(|g| g.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        let z = ParamGrads::zeros_like(store).grads;
        Self {
            cfg,
            m: z.clone(),
            v: z,
            t: 0,
        }
    }

    /// One update of every trainable parameter.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, e) in store.entries.iter_mut().enumerate() {
            if !e.trainable {
                continue;
            }
            let g = &grads.grads[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..e.value.data.len() {
                let gk = g.data[k];
                m.data[k] = c.beta1 * m.data[k] + (1.0 - c.beta1) * gk;
                v.data[k] = c.beta2 * v.data[k] + (1.0 - c.beta2) * gk * gk;
                let mh = m.data[k] / bc1;
                let vh = v.data[k] / bc2;
                e.value.data[k] -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
    }
}
