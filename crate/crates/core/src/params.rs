//! Named, ordered learnable tensors.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Position of a parameter in its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    /// Whether AdamW weight decay applies.
    pub decay: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Param>,
}

/// Tape handles for every parameter of a store, in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Handles supplied by the caller, one per store entry in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a tensor under a unique path.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> Result<ParamId> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        let grad = Tensor::zeros(value.shape());
        let (id, _) = self.entries.insert_full(name, Param { value, grad, decay });
        Ok(ParamId(id))
    }

    /// Weight drawn from a truncated normal with std 0.02.
    pub fn weight(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        rng: &mut SeededRng,
    ) -> Result<ParamId> {
        let t = Tensor::from_fn(shape, |_| rng.trunc_normal(0.02));
        self.add(name, t, true)
    }

    /// Weight drawn from `N(0, std²)`.
    pub fn normal_weight(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut SeededRng,
    ) -> Result<ParamId> {
        let t = Tensor::from_fn(shape, |_| std * rng.normal());
        self.add(name, t, true)
    }

    /// Zero-initialised bias, excluded from decay.
    pub fn bias(&mut self, name: impl Into<String>, len: usize) -> Result<ParamId> {
        self.add(name, Tensor::zeros(&[len]), false)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries
            .get_index(id.0)
            .map(|(k, _)| k.as_str())
            .expect("valid id")
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.entries[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.entries[id.0]
    }

    /// Record every parameter as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .entries
            .values()
            .map(|p| tape.leaf(p.value.clone()))
            .collect();
        Bound { vars }
    }

    /// Record every parameter as a constant (no gradients).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .entries
            .values()
            .map(|p| tape.constant(p.value.clone()))
            .collect();
        Bound { vars }
    }

    /// Add the tape's gradients into the stored gradient slots.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &Bound) {
        for (p, &v) in self.entries.values_mut().zip(&bound.vars) {
            if let Some(g) = tape.grad(v) {
                p.grad
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, b)| *a += b);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Scalar count of parameters whose path starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, p)| p.value.numel())
            .sum()
    }
}
