//! Named parameter storage with per-parameter gradient accumulators.

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};

/// Handle to one named parameter array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Ordered collection of named 64-bit parameter matrices. Every parameter
/// carries a gradient accumulator of identical shape. Iteration order is
/// insertion order, which keeps optimizer updates deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    grads: Vec<Array2<f64>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Array2<f64>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = self.values.len();
        self.index.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.grads.push(Array2::zeros(value.raw_dim()));
        self.values.push(value);
        Ok(ParamId(id))
    }

    /// Adds a Glorot-uniform initialized matrix: U(-a, a), a = sqrt(6/(fan_in+fan_out)).
    pub fn add_glorot<R: Rng>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let value = Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..limit));
        self.add(name, value)
    }

    pub fn add_zeros(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        self.add(name, Array2::zeros((rows, cols)))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Array2<f64> {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    /// Adds `scale * grads` into the accumulators.
    pub fn accumulate(&mut self, grads: &GradStore, scale: f64) {
        assert_eq!(self.grads.len(), grads.arrays.len());
        for (acc, g) in self.grads.iter_mut().zip(&grads.arrays) {
            acc.scaled_add(scale, g);
        }
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// Per-scene gradient buffers, shape-parallel to a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct GradStore {
    arrays: Vec<Array2<f64>>,
}

impl GradStore {
    pub fn zeros_like(params: &ParamStore) -> Self {
        GradStore {
            arrays: params.values.iter().map(|v| Array2::zeros(v.raw_dim())).collect(),
        }
    }

    pub fn add(&mut self, id: ParamId, grad: &Array2<f64>) {
        self.arrays[id.0] += grad;
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.arrays[id.0]
    }

    pub fn merge(&mut self, other: &GradStore) {
        assert_eq!(self.arrays.len(), other.arrays.len());
        for (a, b) in self.arrays.iter_mut().zip(&other.arrays) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for a in &mut self.arrays {
            *a *= k;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.arrays
            .iter()
            .flat_map(|a| a.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_unique() {
        let mut store = ParamStore::new();
        store.add_zeros("w", 2, 2).unwrap();
        assert!(store.add_zeros("w", 2, 2).is_err());
    }

    #[test]
    fn glorot_within_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let id = store.add_glorot("w", 16, 48, &mut rng).unwrap();
        let limit = (6.0 / 64.0f64).sqrt();
        assert!(store.value(id).iter().all(|v| v.abs() < limit));
    }

    #[test]
    fn accumulate_scales() {
        let mut store = ParamStore::new();
        let id = store.add_zeros("w", 1, 2).unwrap();
        let mut gs = GradStore::zeros_like(&store);
        gs.add(id, &ndarray::array![[2.0, -4.0]]);
        store.accumulate(&gs, 0.5);
        assert_eq!(store.grad(id), &ndarray::array![[1.0, -2.0]]);
    }
}
