//! Named parameter storage and binding onto a tape.

use std::collections::HashMap;
use std::ops::Index;

use rand::Rng;

use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named tensors. Insertion order is the canonical
/// order for optimizers and serialization.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    /// Uniform init in `[-bound, bound]`.
    pub fn add_uniform(&mut self, name: impl Into<String>, shape: &[usize], bound: f64, rng: &mut impl Rng) -> ParamId {
        let t = Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-bound..=bound));
        self.add(name, t)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape.to_vec()))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    /// Puts every parameter on `graph`, as gradient leaves when `trainable`.
    pub fn bind<'g>(&self, graph: &'g Graph, trainable: bool) -> Bound<'g> {
        let vars = self
            .values
            .iter()
            .map(|v| {
                if trainable {
                    graph.leaf(v.clone())
                } else {
                    graph.constant(v.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Gradients for every parameter in store order; zeros where none flowed.
    pub fn collect_grads(&self, bound: &Bound<'_>, grads: &Gradients) -> Vec<Tensor> {
        bound.vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    }
}

/// Parameters of a [`ParamStore`] as vars on one graph.
pub struct Bound<'g> {
    vars: Vec<Var<'g>>,
}

impl<'g> Bound<'g> {
    /// Wraps vars that are already on a graph, in store order. Used to evaluate
    /// a model at perturbed parameter values during gradient checks.
    pub fn from_vars(vars: Vec<Var<'g>>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var<'g> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'g>] {
        &self.vars
    }
}

impl<'g> Index<ParamId> for Bound<'g> {
    type Output = Var<'g>;

    fn index(&self, id: ParamId) -> &Var<'g> {
        &self.vars[id.0]
    }
}
