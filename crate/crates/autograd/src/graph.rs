use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::Tensor;

/// Backward rule of a recorded operation: maps the output gradient to one
/// optional gradient per input. Inputs whose `needs` flag is false may be
/// skipped by returning `None`.
pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>>>;

pub struct BackwardCtx<'a> {
    pub grad: &'a Tensor,
    pub output: &'a Tensor,
    inputs: Vec<&'a Tensor>,
    needs: Vec<bool>,
}

impl<'a> BackwardCtx<'a> {
    pub fn input(&self, i: usize) -> &'a Tensor {
        self.inputs[i]
    }

    pub fn needs(&self, i: usize) -> bool {
        self.needs[i]
    }
}

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// A single-use tape. Build one per forward pass, call [`Graph::backward`],
/// then drop it.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
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

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var { graph: self, id: nodes.len() - 1 }
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Node { value: Rc::new(value), parents: vec![], backward: None, requires_grad: false })
    }

    /// Leaf that gradients are tracked for.
    pub fn variable(&self, value: Tensor) -> Var<'_> {
        self.push(Node { value: Rc::new(value), parents: vec![], backward: None, requires_grad: true })
    }

    /// Records an operation with an explicit backward rule. The rule is only
    /// stored when at least one input requires a gradient.
    pub fn custom<'g, F>(&'g self, inputs: &[Var<'g>], value: Tensor, backward: F) -> Var<'g>
    where
        F: Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>> + 'static,
    {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| {
                debug_assert!(std::ptr::eq(v.graph, self), "var from another graph");
                nodes[v.id].requires_grad
            })
        };
        if !requires_grad {
            return self.constant(value);
        }
        self.push(Node {
            value: Rc::new(value),
            parents: inputs.iter().map(|v| v.id).collect(),
            backward: Some(Box::new(backward)),
            requires_grad: true,
        })
    }

    /// Reverse pass from `root`, seeded with ones. Only paths leading to
    /// `wrt` are traversed.
    pub fn backward(&self, root: Var<'_>, wrt: &[Var<'_>]) -> Gradients {
        let nodes = self.nodes.borrow();
        let n = root.id + 1;
        let mut needs = vec![false; n];
        for v in wrt {
            if v.id < n && nodes[v.id].requires_grad {
                needs[v.id] = true;
            }
        }
        for i in 0..n {
            if !needs[i] && nodes[i].requires_grad {
                needs[i] = nodes[i].parents.iter().any(|&p| needs[p]);
            }
        }
        let mut is_target = vec![false; n];
        for v in wrt {
            if v.id < n {
                is_target[v.id] = true;
            }
        }

        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[root.id] = Some(Tensor::ones(nodes[root.id].value.shape()));
        for i in (0..n).rev() {
            if !needs[i] {
                continue;
            }
            let node = &nodes[i];
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(grad) = (if is_target[i] { grads[i].clone() } else { grads[i].take() }) else {
                continue;
            };
            let ctx = BackwardCtx {
                grad: &grad,
                output: &node.value,
                inputs: node.parents.iter().map(|&p| nodes[p].value.as_ref()).collect(),
                needs: node.parents.iter().map(|&p| needs[p]).collect(),
            };
            let input_grads = backward(&ctx);
            debug_assert_eq!(input_grads.len(), node.parents.len());
            for (&p, g) in node.parents.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !needs[p] {
                    continue;
                }
                debug_assert_eq!(g.shape(), nodes[p].value.shape(), "bad gradient shape from node {i}");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        for (i, g) in grads.iter_mut().enumerate() {
            if !is_target[i] {
                *g = None;
            }
        }
        Gradients { grads }
    }
}

/// Gradients of the requested leaves.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or zeros when it does not influence the root.
    pub fn get(&self, v: Var<'_>) -> Tensor {
        match self.grads.get(v.id).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(v.value().shape()),
        }
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Var<'g> {
        if !self.requires_grad() {
            return *self;
        }
        self.graph.constant((*self.value()).clone())
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }
}
