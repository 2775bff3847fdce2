//! Named parameter storage.
//!
//! Model topology structs hold [`ParamId`] handles; values live in a
//! [`ParamStore`] with a fixed registration order. The optimizer, the
//! checkpoint writer and the gradient checker all iterate in that order,
//! which is what makes runs reproducible.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Clone)]
pub struct ParamEntry<S> {
    pub name: String,
    pub tensor: Tensor<S>,
    /// Whether weight decay applies. False exactly for normalization gains
    /// and bias vectors.
    pub decay: bool,
}

#[derive(Clone)]
pub struct ParamStore<S> {
    entries: Vec<ParamEntry<S>>,
    by_name: HashMap<String, usize>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor<S>, decay: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            tensor,
            decay,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.entries[id.0].tensor
    }

    pub fn set(&mut self, id: ParamId, tensor: Tensor<S>) {
        assert_eq!(self.entries[id.0].tensor.shape(), tensor.shape());
        self.entries[id.0].tensor = tensor;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<S>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut ParamEntry<S>)> {
        self.entries
            .iter_mut()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e))
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    tensor: e.tensor.cast(),
                    decay: e.decay,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Loads named tensors (e.g. from a checkpoint); every parameter must be
    /// present with a matching shape.
    pub fn load_values(&mut self, values: &HashMap<String, Tensor<S>>) -> Result<()> {
        for e in &mut self.entries {
            let t = values.get(&e.name).ok_or_else(|| {
                Error::Checkpoint(format!("missing parameter {}", e.name))
            })?;
            if t.shape() != e.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    e.name,
                    t.shape(),
                    e.tensor.shape()
                )));
            }
            e.tensor = t.clone();
        }
        Ok(())
    }
}

/// Parameters bound into a graph as leaf nodes for one forward pass.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl<S: Scalar> Graph<S> {
    /// Inserts every parameter as a gradient-carrying leaf, in store order.
    pub fn bind(&mut self, store: &ParamStore<S>) -> Bound {
        let vars = store
            .entries
            .iter()
            .map(|e| self.parameter(e.tensor.clone()))
            .collect();
        Bound { vars }
    }
}
