//! Named parameter registry shared by models, the optimizer and checkpoints.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Embedding,
    /// Weight of a linear map, stored `[in x out]`.
    Linear,
    NormGain,
    NormOffset,
    AgreementScore,
}

impl ParamKind {
    /// Decoupled weight decay applies to matrices only.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Embedding | ParamKind::Linear)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, usize>,
}

/// Graph leaves for every parameter of a store, index-aligned with it.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter {name}")));
        }
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            kind,
            value,
            trainable: true,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::Format(format!("missing parameter {name}")))
    }

    /// Looks up `name` and checks its shape.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let id = self.id(name)?;
        let got = self.entries[id.0].value.shape();
        if got != shape {
            return Err(Error::Shape(format!("{name}: expected {shape:?}, found {got:?}")));
        }
        Ok(id)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub(crate) fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry<T> {
        &mut self.entries[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    /// Sets trainability for every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.trainable = trainable;
            }
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Creates a leaf per parameter; trainable ones require gradients.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| g.leaf(e.value.clone(), e.trainable))
            .collect();
        Bound { vars }
    }

    /// Moves gradients of bound parameters out of `grads`.
    pub fn collect_grads(&self, bound: &Bound, grads: &mut Gradients<T>) -> Vec<Option<Tensor<T>>> {
        bound.vars.iter().map(|&v| grads.take(v)).collect()
    }

    /// Appends every entry of `other` under `prefix`.
    pub fn absorb(&mut self, prefix: &str, other: ParamStore<T>) -> Result<()> {
        for e in other.entries {
            let id = self.insert(format!("{prefix}{}", e.name), e.kind, e.value)?;
            self.entries[id.0].trainable = e.trainable;
        }
        Ok(())
    }

    /// Entries under `prefix`, with the prefix stripped.
    pub fn extract(&self, prefix: &str) -> Result<ParamStore<T>> {
        let mut out = ParamStore::new();
        for e in &self.entries {
            if let Some(rest) = e.name.strip_prefix(prefix) {
                out.insert(rest, e.kind, e.value.clone())?;
            }
        }
        Ok(out)
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    kind: e.kind,
                    value: e.value.cast(),
                    trainable: e.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Structural check that no linear map carries a bias vector: every linear
/// weight is a matrix and the only rank-1 parameters are LayerNorm gains and
/// offsets or agreement scores.
pub fn check_bias_free<T: Scalar>(store: &ParamStore<T>) -> Result<()> {
    for e in store.entries() {
        let rank1 = e.value.shape().len() == 1;
        let ok = match e.kind {
            ParamKind::Linear | ParamKind::Embedding => e.value.shape().len() == 2,
            ParamKind::NormGain | ParamKind::NormOffset | ParamKind::AgreementScore => rank1,
        };
        if !ok || e.name.contains("bias") {
            return Err(Error::Invalid(format!(
                "parameter {} ({:?}, shape {:?}) looks like a linear bias",
                e.name,
                e.kind,
                e.value.shape()
            )));
        }
    }
    Ok(())
}
