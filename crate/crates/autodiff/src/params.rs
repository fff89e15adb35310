use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{AutodiffError, Result};
use crate::real::Real;
use crate::tape::{Gradients, Tape};
use crate::tensor::Tensor;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
}

static NEXT_STORE_KEY: AtomicU64 = AtomicU64::new(1);

/// Named trainable tensors with gradient accumulators.
///
/// Each store carries a process-unique key (shared by its clones) so that a
/// tape holding parameters of several stores routes gradients correctly.
#[derive(Debug, Clone)]
pub struct ParamStore<S> {
    key: u64,
    params: Vec<Parameter<S>>,
}

impl<S: PartialEq> PartialEq for ParamStore<S> {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params
    }
}

impl<S: Real> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            key: NEXT_STORE_KEY.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
        }
    }

    pub(crate) fn key(&self) -> u64 {
        self.key
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<ParamId> {
        let name = name.into();
        if self.find(&name).is_some() {
            return Err(AutodiffError::Contract(format!("duplicate parameter `{name}`")));
        }
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite { op: "parameter" });
        }
        let grad = Tensor::zeros(value.shape().to_vec());
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<S>> {
        self.params.iter_mut()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.params[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].grad
    }

    /// Total number of scalar parameters.
    pub fn element_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = S::ZERO);
        }
    }

    /// Adds the gradients of every parameter bound on `tape` into the
    /// accumulators. Repeated calls add up until [`ParamStore::zero_grad`].
    pub fn accumulate(&mut self, tape: &Tape<S>, grads: &Gradients<S>) -> Result<()> {
        for (id, var) in tape.param_bindings(self) {
            let Some(g) = grads.wrt(var) else { continue };
            let p = self.params.get_mut(id.0).ok_or_else(|| {
                AutodiffError::Contract(format!("tape binds unknown parameter #{}", id.0))
            })?;
            if p.grad.len() != g.len() {
                return Err(AutodiffError::Contract(format!(
                    "gradient for `{}` has {} elements, parameter has {}",
                    p.name,
                    g.len(),
                    p.grad.len()
                )));
            }
            p.grad.data_mut().iter_mut().zip(g).for_each(|(a, &b)| *a += b);
        }
        Ok(())
    }
}
