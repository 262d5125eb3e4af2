use std::cell::RefCell;
use std::collections::BTreeMap;

use crate::{Gradients, Graph, Tensor, Var};

/// Named parameter tensors of one network, in deterministic (sorted) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    map: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalars over all tensors.
    pub fn num_scalars(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.map.values().all(Tensor::is_finite)
    }
}

/// A [`ParamSet`] exposed to one [`Graph`]. Each name maps to a single leaf
/// no matter how often it is read, so shared weights accumulate gradients.
pub struct Binding<'g, 'p> {
    graph: &'g Graph,
    params: &'p ParamSet,
    trainable: bool,
    leaves: RefCell<BTreeMap<String, Var<'g>>>,
}

impl<'g, 'p> Binding<'g, 'p> {
    pub fn new(graph: &'g Graph, params: &'p ParamSet, trainable: bool) -> Self {
        Self { graph, params, trainable, leaves: RefCell::new(BTreeMap::new()) }
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    /// Leaf for parameter `name`. Panics on unknown names: a missing
    /// parameter is a construction bug, not a runtime condition.
    pub fn get(&self, name: &str) -> Var<'g> {
        if let Some(v) = self.leaves.borrow().get(name) {
            return *v;
        }
        let value = self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .clone();
        let v = if self.trainable { self.graph.variable(value) } else { self.graph.constant(value) };
        self.leaves.borrow_mut().insert(name.to_string(), v);
        v
    }

    /// Leaves materialized so far.
    pub fn vars(&self) -> Vec<Var<'g>> {
        self.leaves.borrow().values().copied().collect()
    }

    /// Gradient for every parameter of the set; unused ones get zeros.
    pub fn grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        let leaves = self.leaves.borrow();
        self.params
            .iter()
            .map(|(name, t)| {
                let g = match leaves.get(name) {
                    Some(v) => grads.get(*v),
                    None => Tensor::zeros(t.shape()),
                };
                (name.clone(), g)
            })
            .collect()
    }
}

impl Graph {
    pub fn bind<'g, 'p>(&'g self, params: &'p ParamSet, trainable: bool) -> Binding<'g, 'p> {
        Binding::new(self, params, trainable)
    }
}
