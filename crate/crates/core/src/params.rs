//! Named parameter and statistics collections.

use std::collections::BTreeMap;

use crate::autodiff::{Gradients, NormStats, Tape, Var};
use crate::error::TensorError;
use crate::tensor::{Scalar, Tensor};

/// Trainable tensors keyed by dotted path, e.g. `enc.0.conv1.kernel`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ModelParams<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn new() -> Self {
        ModelParams { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Option<Tensor<T>> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Records every tensor on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundParams {
        BoundParams { vars: self.tensors.iter().map(|(k, v)| (k.clone(), tape.param(v.clone()))).collect() }
    }

    /// Records every tensor as a constant, for inference without gradients.
    pub fn bind_constants(&self, tape: &mut Tape<T>) -> BoundParams {
        BoundParams { vars: self.tensors.iter().map(|(k, v)| (k.clone(), tape.constant(v.clone()))).collect() }
    }
}

/// Tape handles for a bound [`ModelParams`].
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Binds names to already-recorded tape variables.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        BoundParams { vars: vars.into_iter().collect() }
    }

    pub fn get(&self, name: &str) -> Result<Var, TensorError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::Usage(format!("parameter {name:?} is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradient tensors keyed by parameter name. Constants are skipped.
    pub fn collect<T: Scalar>(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars.iter().filter_map(|(k, &v)| Some((k.clone(), grads.tensor(v)?))).collect()
    }
}

/// Running normalization statistics keyed by norm-site path.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunningStats<T> {
    stats: BTreeMap<String, NormStats<T>>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new() -> Self {
        RunningStats { stats: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, stats: NormStats<T>) {
        self.stats.insert(name.into(), stats);
    }

    pub fn get(&self, name: &str) -> Option<&NormStats<T>> {
        self.stats.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut NormStats<T>, TensorError> {
        self.stats
            .get_mut(name)
            .ok_or_else(|| TensorError::Usage(format!("no running statistics for {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &NormStats<T>)> {
        self.stats.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.stats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stats.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> RunningStats<U> {
        RunningStats { stats: self.stats.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }
}
