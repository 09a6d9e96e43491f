use std::cell::RefCell;

use indexmap::IndexMap;

use super::graph::{Gradients, Graph, Var};
use super::tensor::{Scalar, Tensor};
use super::{Result, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, ordered parameter arrays. Insertion order is the canonical order
/// used for checkpoints, optimizer state and checksums.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Tensor<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter; re-registering a name replaces its value.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<f64>) -> ParamId {
        let (idx, _) = self.params.insert_full(name.into(), value);
        ParamId(idx)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.params
            .get_index_of(name)
            .map(ParamId)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<f64> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<f64> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<f64>> {
        self.params.get(name)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.params.get_index(id.0).map(|(k, _)| k.as_str()).unwrap_or("")
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<f64>)> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, (k, v))| (ParamId(i), k.as_str(), v))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    pub fn numel_where(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| pred(k))
            .map(|(_, v)| v.numel())
            .sum()
    }

    /// SHA-256 over names, shapes and little-endian values of the selected
    /// parameters, in store order.
    pub fn checksum_where(&self, pred: impl Fn(&str) -> bool) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (k, v) in self.params.iter().filter(|(k, _)| pred(k)) {
            h.update(k.as_bytes());
            for d in v.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.data() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn checksum(&self) -> String {
        self.checksum_where(|_| true)
    }
}

/// Gradients keyed by [`ParamId`]; absent entries are zero.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradMap {
    grads: Vec<Option<Vec<f64>>>,
}

impl GradMap {
    pub fn new(len: usize) -> Self {
        Self {
            grads: vec![None; len],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn set(&mut self, id: ParamId, g: Vec<f64>) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        self.grads[id.0] = Some(g);
    }

    /// True when the gradient for `id` is absent or identically zero.
    pub fn is_zero(&self, id: ParamId) -> bool {
        self.get(id).is_none_or(|g| g.iter().all(|&v| v == 0.0))
    }

    /// Accumulates `other * weight`.
    pub fn add_scaled(&mut self, other: &GradMap, weight: f64) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            let Some(src) = src else { continue };
            let d = dst.get_or_insert_with(|| vec![0.0; src.len()]);
            for (a, &b) in d.iter_mut().zip(src) {
                *a += b * weight;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.grads
            .iter()
            .enumerate()
            .filter(|(_, g)| g.is_some())
            .map(|(i, _)| ParamId(i))
    }
}

/// Binds parameters of a [`ParamStore`] into one [`Graph`] on demand.
///
/// Parameters rejected by the trainable predicate enter the graph as
/// constants, so no gradient is ever computed for them.
pub struct Binder<'g, 's, T: Scalar = f64> {
    graph: &'g Graph<T>,
    store: &'s ParamStore,
    trainable: Box<dyn Fn(&str) -> bool + 's>,
    bound: RefCell<Vec<Option<Var<'g, T>>>>,
}

impl<'g, 's, T: Scalar> Binder<'g, 's, T> {
    pub fn new(graph: &'g Graph<T>, store: &'s ParamStore) -> Self {
        Self::with_trainable(graph, store, |_| true)
    }

    pub fn with_trainable(graph: &'g Graph<T>, store: &'s ParamStore, trainable: impl Fn(&str) -> bool + 's) -> Self {
        Self {
            graph,
            store,
            trainable: Box::new(trainable),
            bound: RefCell::new(vec![None; store.len()]),
        }
    }

    /// A binder where nothing is trainable (inference).
    pub fn frozen(graph: &'g Graph<T>, store: &'s ParamStore) -> Self {
        Self::with_trainable(graph, store, |_| false)
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn get(&self, id: ParamId) -> Var<'g, T> {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let value = self.store.get(id).cast::<T>();
        let v = if (self.trainable)(self.store.name(id)) {
            self.graph.param(value)
        } else {
            self.graph.constant(value)
        };
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Constant leaf in this binder's graph.
    pub fn constant(&self, t: Tensor<T>) -> Var<'g, T> {
        self.graph.constant(t)
    }

    /// Parameter gradients from a backward pass over this binder's graph.
    pub fn grads(&self, gradients: &Gradients<T>) -> GradMap {
        let mut out = GradMap::new(self.store.len());
        for (i, v) in self.bound.borrow().iter().enumerate() {
            if let Some(v) = v {
                if let Some(g) = gradients.get_slice(*v) {
                    out.set(ParamId(i), g.iter().map(|x| x.as_f64()).collect());
                }
            }
        }
        out
    }
}
