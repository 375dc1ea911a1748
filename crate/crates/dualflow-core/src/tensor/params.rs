//! Named parameter storage with trainable/frozen flags.

use std::collections::BTreeMap;

use super::tape::{Gradients, Tape, Var};
use super::Tensor;
use crate::error::{CoreError, Result};

#[derive(Debug, Clone)]
pub(crate) struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

/// Named parameter tensors. Names are unique; frozen parameters never receive
/// optimizer updates. BTreeMap keeps iteration (and therefore checkpoint and
/// update) order deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    pub(crate) entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(CoreError::Param(format!("duplicate parameter '{name}'")));
        }
        self.entries.insert(name.to_string(), Param { value, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| CoreError::Param(format!("unknown parameter '{name}'")))
    }

    pub fn is_trainable(&self, name: &str) -> Result<bool> {
        self.entries
            .get(name)
            .map(|p| p.trainable)
            .ok_or_else(|| CoreError::Param(format!("unknown parameter '{name}'")))
    }

    /// Replace a parameter value (same shape required).
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| CoreError::Param(format!("unknown parameter '{name}'")))?;
        if p.value.shape() != value.shape() {
            return Err(CoreError::Shape(format!(
                "set '{name}': {:?} vs stored {:?}",
                value.shape(),
                p.value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| CoreError::Param(format!("unknown parameter '{name}'")))?;
        p.trainable = trainable;
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        for p in self.entries.values_mut() {
            p.trainable = false;
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total element count over trainable parameters.
    pub fn trainable_numel(&self) -> usize {
        self.entries.values().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }
}

/// Per-forward-pass association between parameter names and tape vars.
///
/// Trainable parameters bind as gradient-receiving leaves; frozen ones bind
/// as constants so backward skips them entirely.
#[derive(Default)]
pub struct Binding {
    vars: BTreeMap<String, Var>,
}

impl Binding {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, tape: &mut Tape, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(v) = self.vars.get(name) {
            return Ok(*v);
        }
        let p = store
            .entries
            .get(name)
            .ok_or_else(|| CoreError::Param(format!("unknown parameter '{name}'")))?;
        let v = if p.trainable { tape.leaf(&p.value) } else { tape.constant(&p.value) };
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Bind as a constant regardless of the trainable flag (inference passes).
    pub fn bind_frozen(&mut self, tape: &mut Tape, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(v) = self.vars.get(name) {
            return Ok(*v);
        }
        let p = store
            .entries
            .get(name)
            .ok_or_else(|| CoreError::Param(format!("unknown parameter '{name}'")))?;
        let v = tape.constant(&p.value);
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Collect gradients for every trainable parameter bound in this pass.
    pub fn grad_map(
        &self,
        tape: &Tape,
        store: &ParamStore,
        grads: &Gradients,
    ) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, var) in &self.vars {
            let trainable = store.entries.get(name).map(|p| p.trainable).unwrap_or(false);
            if !trainable {
                continue;
            }
            if let Some(g) = grads.wrt(tape, *var) {
                out.insert(name.clone(), g);
            }
        }
        out
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(vec![2]), true).unwrap();
        assert!(store.insert("w", Tensor::zeros(vec![2]), true).is_err());
    }

    #[test]
    fn frozen_params_bind_as_constants() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(vec![1], vec![2.0]).unwrap(), false).unwrap();
        store.insert("p", Tensor::new(vec![1], vec![3.0]).unwrap(), true).unwrap();

        let mut tape = Tape::new();
        let mut bind = Binding::new();
        let w = bind.bind(&mut tape, &store, "w").unwrap();
        let p = bind.bind(&mut tape, &store, "p").unwrap();
        let prod = tape.mul(w, p).unwrap();
        let loss = tape.sum_all(prod).unwrap();
        let grads = tape.backward(loss).unwrap();
        let map = bind.grad_map(&tape, &store, &grads);
        assert!(map.contains_key("p"));
        assert!(!map.contains_key("w"));
        assert_eq!(map["p"].data(), &[2.0]);
    }
}
