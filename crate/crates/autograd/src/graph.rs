//! Define-by-run tape. Every op appends a node holding its value and, when any
//! input requires a gradient, a closure mapping the output gradient to input
//! gradients.

use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::Tensor;

/// Maps the gradient of a node's output to gradients of its parents. The
/// second argument says which parents actually need one.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    pub(crate) graph: &'g Graph,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        let id = self.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
        });
        Var { graph: self, id }
    }

    /// A leaf whose gradient is collected by [`Graph::backward`].
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let id = self.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
        });
        Var { graph: self, id }
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Records an op. `make_backward` is only invoked when some parent needs a
    /// gradient, so closures never capture inputs for pure inference.
    pub(crate) fn op<'g, F>(
        &'g self,
        value: Tensor,
        parents: &[Var<'g>],
        make_backward: impl FnOnce() -> F,
    ) -> Var<'g>
    where
        F: Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    {
        for p in parents {
            debug_assert!(std::ptr::eq(p.graph, self), "vars from different graphs");
        }
        let requires_grad = parents.iter().any(|p| self.requires_grad_of(p.id));
        let backward: Option<BackwardFn> = if requires_grad {
            Some(Box::new(make_backward()))
        } else {
            None
        };
        let id = self.push(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            backward,
            requires_grad,
        });
        Var { graph: self, id }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        let root = &nodes[loss.id];
        assert_eq!(root.value.numel(), 1, "backward() needs a scalar loss");
        grads[loss.id] = Some(Tensor::full(root.value.shape().to_vec(), 1.0));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "grad shape for node {p}");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        // Interior gradients were consumed above; leaves have no backward fn
        // and keep their accumulated gradient.
        Gradients { grads }
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros of the right shape if nothing reached it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad_of(self.id)
    }

    /// Scalar value of a one-element var.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Var<'g> {
        self.graph.constant((*self.value()).clone())
    }
}
