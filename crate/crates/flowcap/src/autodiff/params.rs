//! Named parameter tensors with per-parameter gradient accumulators.

use std::collections::HashMap;

use crate::autodiff::{Binding, Gradients};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

struct Entry {
    name: String,
    value: Tensor,
    grad: Tensor,
}

/// Parameter container with stable insertion ordering.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter '{name}'"
        );
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            grad,
        });
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let i = self.index[name];
        &self.entries[i].value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = self.index[name];
        &mut self.entries[i].value
    }

    pub fn grad(&self, name: &str) -> &Tensor {
        let i = self.index[name];
        &self.entries[i].grad
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// Reset every accumulator to exact zero.
    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().fill(0.0);
        }
    }

    /// Add the tape gradients of bound parameters into the accumulators.
    pub fn accumulate(&mut self, binding: &Binding, grads: &Gradients) {
        for (name, var) in binding.names.iter().zip(&binding.vars) {
            if let Some(g) = grads.wrt(*var) {
                let i = self.index[name];
                let updated = tensor::add(&self.entries[i].grad, g)
                    .expect("gradient shape equals parameter shape");
                self.entries[i].grad = updated;
            }
        }
    }

    /// Parameter values flattened in store order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.scalar_count());
        for e in &self.entries {
            out.extend_from_slice(e.value.data());
        }
        out
    }

    /// Gradient accumulators flattened in store order.
    pub fn flatten_grads(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.scalar_count());
        for e in &self.entries {
            out.extend_from_slice(e.grad.data());
        }
        out
    }

    /// Overwrite parameter values from a flat vector in store order.
    pub fn unflatten(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.scalar_count());
        let mut offset = 0;
        for e in &mut self.entries {
            let n = e.value.len();
            e.value.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }

    /// Add a flat gradient vector (store order) into the accumulators.
    pub fn add_grads_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.scalar_count());
        let mut offset = 0;
        for e in &mut self.entries {
            let n = e.grad.len();
            for (g, d) in e.grad.data_mut().iter_mut().zip(&flat[offset..offset + n]) {
                *g += d;
            }
            offset += n;
        }
    }

    /// Versioned JSON document with 17 significant decimal digits per value,
    /// enough to reproduce every f64 bit pattern.
    pub fn to_json(&self) -> String {
        let mut out = String::from("{\"format_version\":1,\"params\":[");
        for (k, e) in self.entries.iter().enumerate() {
            if k > 0 {
                out.push(',');
            }
            out.push_str(&format!("{{\"name\":{:?},\"shape\":[", e.name));
            for (i, d) in e.value.shape().iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&d.to_string());
            }
            out.push_str("],\"data\":[");
            for (i, v) in e.value.data().iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&format_f64(*v));
            }
            out.push_str("]}");
        }
        out.push_str("]}");
        out
    }

    pub fn from_json(doc: &serde_json::Value) -> Result<Self> {
        let bad = |msg: &str| Error::ModelFormat(msg.to_string());
        let version = doc
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| bad("missing format_version"))?;
        if version != 1 {
            return Err(Error::ModelFormat(format!(
                "unsupported format_version {version}"
            )));
        }
        let params = doc
            .get("params")
            .and_then(|v| v.as_array())
            .ok_or_else(|| bad("missing params array"))?;
        let mut store = ParamStore::new();
        for p in params {
            let name = p
                .get("name")
                .and_then(|v| v.as_str())
                .ok_or_else(|| bad("parameter without name"))?;
            let shape: Vec<usize> = p
                .get("shape")
                .and_then(|v| v.as_array())
                .ok_or_else(|| bad("parameter without shape"))?
                .iter()
                .map(|d| d.as_u64().map(|d| d as usize))
                .collect::<Option<_>>()
                .ok_or_else(|| bad("non-integer shape entry"))?;
            let data: Vec<f64> = p
                .get("data")
                .and_then(|v| v.as_array())
                .ok_or_else(|| bad("parameter without data"))?
                .iter()
                .map(|d| d.as_f64())
                .collect::<Option<_>>()
                .ok_or_else(|| bad("non-numeric data entry"))?;
            let tensor = Tensor::new(shape, data)
                .map_err(|e| Error::ModelFormat(format!("parameter '{name}': {e}")))?;
            store.insert(name, tensor);
        }
        Ok(store)
    }
}

/// 17 significant digits; round-trips every finite f64 exactly.
fn format_f64(v: f64) -> String {
    format!("{:.16e}", v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn json_round_trip_is_bit_exact() {
        let mut rng = Rng::new(11);
        let mut store = ParamStore::new();
        let values: Vec<f64> = (0..64)
            .map(|i| match i % 4 {
                0 => rng.normal() * 1e-12,
                1 => rng.normal() * 1e9,
                2 => rng.uniform() - 0.5,
                _ => rng.normal(),
            })
            .collect();
        store.insert("w", Tensor::new(vec![8, 8], values.clone()).unwrap());
        store.insert("b", Tensor::vector(&[0.1, -0.2, 1.0 / 3.0]));

        let doc: serde_json::Value = serde_json::from_str(&store.to_json()).unwrap();
        let restored = ParamStore::from_json(&doc).unwrap();
        for (a, b) in store.iter().zip(restored.iter()) {
            assert_eq!(a.0, b.0);
            for (x, y) in a.1.data().iter().zip(b.1.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn zero_grads_resets_exactly() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(&[1.0, 2.0]));
        store.zero_grads();
        assert_eq!(store.grad("w").data(), &[0.0, 0.0]);
    }
}

