use std::collections::HashMap;
use std::sync::Arc;

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A named tensor that is either trainable or frozen.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Arc<Tensor>,
    pub trainable: bool,
}

/// Ordered collection of named parameters.
///
/// Insertion order is preserved; it fixes checkpoint layout and optimizer
/// iteration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter and returns its slot.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> usize {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            value: Arc::new(value),
            trainable,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.slot(name).map(|i| self.params[i].value.as_ref())
    }

    pub fn by_slot(&self, slot: usize) -> &Tensor {
        &self.params[slot].value
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .slot(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        let current = &self.params[slot].value;
        if current.shape() != value.shape() {
            return Err(Error::shape("set_param", current.shape(), value.shape()));
        }
        self.params[slot].value = Arc::new(value);
        Ok(())
    }

    /// Mutable access for in-place optimizer updates.
    pub fn value_mut(&mut self, slot: usize) -> &mut Tensor {
        Arc::make_mut(&mut self.params[slot].value)
    }

    pub fn is_trainable(&self, slot: usize) -> bool {
        self.params[slot].trainable
    }

    pub fn trainable_slots(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.params.len()).filter(|&i| self.params[i].trainable)
    }

    pub fn num_trainable_values(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Records every parameter as a tape leaf; frozen ones become constants.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if p.trainable {
                    tape.param(Arc::clone(&p.value))
                } else {
                    tape.constant(Arc::clone(&p.value))
                }
            })
            .collect();
        BoundParams { vars }
    }

    /// Binds every slot, substituting caller-provided vars for `overrides`.
    pub fn bind_with<'t>(&self, tape: &'t Tape, overrides: &[(usize, Var<'t>)]) -> BoundParams<'t> {
        let mut bound = self.bind(tape);
        for &(slot, var) in overrides {
            bound.vars[slot] = var;
        }
        bound
    }
}

/// Tape leaves for every slot of a [`ParamStore`].
pub struct BoundParams<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> BoundParams<'t> {
    pub fn var(&self, slot: usize) -> Var<'t> {
        self.vars[slot]
    }

    /// Gradient for `slot`, if it was bound as trainable.
    pub fn grad<'g>(&self, grads: &'g Gradients, slot: usize) -> Option<&'g Tensor> {
        grads.get(self.vars[slot])
    }
}
