//! Named parameter storage and initialization.

use std::ops::Index;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numeric::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat list of named model parameters. Values are shared with tapes
/// through `Arc`, so binding a forward pass copies nothing.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(Arc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Cheap snapshot of all values (shares storage until mutated).
    pub fn snapshot(&self) -> Vec<Arc<Tensor>> {
        self.values.clone()
    }

    pub fn restore(&mut self, values: Vec<Arc<Tensor>>) {
        assert_eq!(values.len(), self.values.len());
        self.values = values;
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::Dimension {
                op: "set_param",
                lhs: self.values[id.0].shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.values[id.0] = Arc::new(value);
        Ok(())
    }

    /// Places every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bindings {
        Bindings(self.values.iter().map(|v| tape.leaf_shared(v.clone(), true)).collect())
    }

    /// Places every parameter on `tape` as a constant (evaluation).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bindings {
        Bindings(self.values.iter().map(|v| tape.leaf_shared(v.clone(), false)).collect())
    }
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bindings(Vec<Var>);

impl Bindings {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for Bindings {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// Draws initial values: fan-in scaled uniform for matrices, small normal
/// for embedding tables, zeros for biases.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Self { rng }
    }

    pub fn matrix(&mut self, rows: usize, cols: usize) -> Tensor {
        let bound = 1.0 / (rows.max(1) as f64).sqrt();
        let data = (0..rows * cols).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        Tensor::new(vec![rows, cols], data).expect("shape matches")
    }

    pub fn embedding(&mut self, rows: usize, cols: usize) -> Tensor {
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let data = (0..rows * cols).map(|_| normal.sample(&mut self.rng)).collect();
        Tensor::new(vec![rows, cols], data).expect("shape matches")
    }
}

/// `x W + b` with `W: [in x out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init.matrix(d_in, d_out));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[1, d_out])));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Bindings, x: Var) -> Result<Var> {
        tape.linear(x, bind[self.weight], self.bias.map(|b| bind[b]))
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> {
        std::iter::once(self.weight).chain(self.bias)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn matrix_init_is_bounded_by_fan_in() {
        let mut init = Initializer::new(ChaCha8Rng::seed_from_u64(1));
        let m = init.matrix(16, 4);
        assert!(m.data().iter().all(|v| v.abs() <= 0.25));
        let e = init.embedding(100, 10);
        let std = (e.data().iter().map(|v| v * v).sum::<f64>() / e.len() as f64).sqrt();
        assert!((std - 0.02).abs() < 0.003, "{std}");
    }

    #[test]
    fn snapshot_is_copy_on_write() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::filled(&[2, 2], 1.0));
        let snap = store.snapshot();
        store.get_mut(id).data_mut()[0] = 5.0;
        assert_eq!(snap[0].data()[0], 1.0);
        assert_eq!(store.get(id).data()[0], 5.0);
    }
}
