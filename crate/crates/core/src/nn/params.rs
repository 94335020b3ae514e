//! Central registry for model parameters. Modules hold [`ParamId`]s; the
//! store owns the values. Graphs borrow values as `Arc`s, so a forward pass
//! never copies weights.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::ArrayD;

use crate::nn::graph::{Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Arc<ArrayD<f64>>,
    pub trainable: bool,
    /// Per-parameter learning-rate multiplier (1.0 for most groups).
    pub lr_scale: f64,
    /// Whether weight decay applies to this parameter.
    pub decay: bool,
}

#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<f64>, trainable: bool) -> ParamId {
        self.add_with(name, value, trainable, 1.0, true)
    }

    pub fn add_with(
        &mut self,
        name: impl Into<String>,
        value: ArrayD<f64>,
        trainable: bool,
        lr_scale: f64,
        decay: bool,
    ) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            value: Arc::new(value),
            trainable,
            lr_scale,
            decay,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.entries[id.0].value
    }

    pub fn value_arc(&self, id: ParamId) -> Arc<ArrayD<f64>> {
        Arc::clone(&self.entries[id.0].value)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn set_value(&mut self, id: ParamId, value: ArrayD<f64>) {
        assert_eq!(
            self.entries[id.0].value.shape(),
            value.shape(),
            "parameter {} shape change",
            self.entries[id.0].name
        );
        self.entries[id.0].value = Arc::new(value);
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Flat copy of every trainable value, used by the frozen-teacher and
    /// checkpoint round-trip tests to compare states bit for bit.
    pub fn snapshot(&self) -> Vec<(String, ArrayD<f64>)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), (*e.value).clone()))
            .collect()
    }
}

impl Graph {
    /// Bring a parameter into the graph as a leaf; trainable parameters
    /// receive gradients, frozen ones are constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let e = store.entry(id);
        self.param_leaf(id, Arc::clone(&e.value), e.trainable)
    }
}
