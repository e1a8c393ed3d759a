//! Named trainable tensors and their binding onto a tape.

use std::ops::Index;

use eqgat_autodiff::{Tape, Tensor, Var};
use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{EqgatError, Result};

/// Position of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Insertion-ordered map from parameter name to value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(EqgatError::Config(format!("duplicate parameter name {name:?}")));
        }
        let (index, _) = self.params.insert_full(name, value);
        Ok(ParamId(index))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.get_index_of(name).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.params.get_index(id.0).map(|(k, _)| k.as_str()).expect("valid id")
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn values(&self) -> impl Iterator<Item = &Tensor> {
        self.params.values()
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.values_mut()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Records every parameter as a tracked leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.params.values().map(|t| tape.leaf(t.clone())).collect())
    }

    /// Records every parameter as an untracked constant, for inference.
    pub fn bind_constant(&self, tape: &mut Tape) -> Bound {
        Bound(self.params.values().map(|t| tape.constant(t.clone())).collect())
    }

    /// Replaces all values, keeping names and requiring identical shapes.
    pub fn load_values(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.len() {
            return Err(EqgatError::Checkpoint(format!(
                "expected {} parameters, got {}",
                self.len(),
                values.len()
            )));
        }
        for ((name, slot), value) in self.params.iter_mut().zip(values) {
            if slot.shape() != value.shape() {
                return Err(EqgatError::Shape {
                    what: format!("parameter {name}"),
                    expected: slot.shape().to_vec(),
                    actual: value.shape().to_vec(),
                });
            }
            *slot = value;
        }
        Ok(())
    }
}

/// Tape handles for every parameter of a store, in store order.
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    /// Wraps handles created elsewhere, e.g. by a gradient checker.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// Seeded parameter initializer.
///
/// Weights are uniform on `[-sqrt(3 / fan_in), sqrt(3 / fan_in)]`, which gives
/// unit-variance outputs for unit-variance inputs. Biases start at zero.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    /// Weight matrix in `[out, in]` convention.
    pub fn weight(&mut self, name: &str, out: usize, fan_in: usize) -> Result<ParamId> {
        let t = self.uniform(&[out, fan_in], (3.0 / fan_in as f64).sqrt());
        self.store.insert(name, t)
    }

    pub fn bias(&mut self, name: &str, size: usize) -> Result<ParamId> {
        self.store.insert(name, Tensor::zeros(&[size]))
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.store.insert(name, Tensor::full(shape, value))
    }

    /// Uniform on `[-limit, limit]`.
    pub fn uniform_param(&mut self, name: &str, shape: &[usize], limit: f64) -> Result<ParamId> {
        let t = self.uniform(shape, limit);
        self.store.insert(name, t)
    }

    fn uniform(&mut self, shape: &[usize], limit: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-limit..=limit)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape and buffer agree")
    }
}
