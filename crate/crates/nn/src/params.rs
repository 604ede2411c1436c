//! Named parameter storage.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{NnError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Buffers (batch-norm running statistics) are persisted but never receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub kind: ParamKind,
    pub trainable: bool,
    value: Arc<Tensor<T>>,
}

impl<T: Scalar> ParamEntry<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub(crate) fn shared(&self) -> Arc<Tensor<T>> {
        Arc::clone(&self.value)
    }

    /// Copy-on-write access; cheap when no graph still holds the tensor.
    pub fn value_mut(&mut self) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.value)
    }

    pub fn requires_grad(&self) -> bool {
        self.trainable && self.kind == ParamKind::Weight
    }
}

/// Ordered collection of named tensors owned by one model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a tensor; panics on duplicate names, which is a model-construction bug.
    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.entries.len());
        self.index.insert(name.clone(), id.0);
        self.entries.push(ParamEntry {
            name,
            kind,
            trainable: true,
            value: Arc::new(value),
        });
        id
    }

    pub fn weight(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.insert(name, ParamKind::Weight, value)
    }

    pub fn buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.insert(name, ParamKind::Buffer, value)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamEntry<T> {
        &mut self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        self.entries[id.0].value()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Number of scalar weights (buffers excluded).
    pub fn num_weights(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Weight)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Marks every parameter whose name starts with `prefix` as (non-)trainable.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.trainable = trainable;
                n += 1;
            }
        }
        n
    }

    /// Overwrites a tensor, checking its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(NnError::Shape(format!(
                "parameter {} expects shape {:?}, got {:?}",
                entry.name,
                entry.value.shape(),
                value.shape()
            )));
        }
        entry.value = Arc::new(value);
        Ok(())
    }

    /// Copies every same-named tensor from `tensors`; every store entry must be covered.
    pub fn load_named(&mut self, tensors: &HashMap<String, Tensor<T>>) -> Result<()> {
        for i in 0..self.entries.len() {
            let name = self.entries[i].name.clone();
            let t = tensors.get(&name).ok_or_else(|| NnError::MissingTensor(name.clone()))?;
            self.set(ParamId(i), t.clone())?;
        }
        Ok(())
    }

    pub fn to_named(&self) -> Vec<(String, Tensor<T>)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), (*e.value).clone()))
            .collect()
    }
}
