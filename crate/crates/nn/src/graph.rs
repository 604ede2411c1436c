//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every operation pushes a node holding its output value, the ids of its
//! parents and (when any parent needs a gradient) a closure mapping the
//! output gradient to parent gradients. [`Graph::backward`] walks the tape in
//! reverse.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `(grad_out, output, parent_values) -> per-parent gradient`.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &Tensor<T>, &[&Tensor<T>]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Arc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    param: Option<ParamId>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
    training: bool,
    record: bool,
    rng: RefCell<ChaCha8Rng>,
    buffer_updates: RefCell<Vec<(ParamId, Tensor<T>)>>,
}

/// Handle to a node of a [`Graph`].
pub struct Var<'g, T> {
    pub(crate) id: usize,
    pub(crate) graph: &'g Graph<T>,
}

impl<T> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for Var<'_, T> {}

impl<T> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

impl<T: Scalar> Graph<T> {
    /// Training mode: dropout active, gradients recorded, batch-norm uses batch statistics.
    pub fn train(seed: u64) -> Self {
        Self::with_mode(true, true, seed)
    }

    /// Evaluation mode: deterministic, nothing recorded.
    pub fn eval() -> Self {
        Self::with_mode(false, false, 0)
    }

    /// Evaluation-mode forward that still records gradients (finite-difference checks).
    pub fn eval_with_grad() -> Self {
        Self::with_mode(false, true, 0)
    }

    pub fn with_mode(training: bool, record: bool, seed: u64) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            training,
            record,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
            buffer_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn rng(&self) -> std::cell::RefMut<'_, ChaCha8Rng> {
        self.rng.borrow_mut()
    }

    /// Leaf node that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(Arc::new(value), None, false)
    }

    /// Leaf node whose gradient is reported by [`Gradients::input`].
    pub fn input(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(Arc::new(value), None, self.record)
    }

    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        let entry = store.get(id);
        let rg = self.record && entry.requires_grad();
        self.leaf(entry.shared(), Some(id), rg)
    }

    fn leaf(&self, value: Arc<Tensor<T>>, param: Option<ParamId>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            param,
            requires_grad,
        });
        Var {
            id: nodes.len() - 1,
            graph: self,
        }
    }

    pub(crate) fn push<F>(&self, value: Tensor<T>, parents: &[Var<'_, T>], backward: F) -> Var<'_, T>
    where
        F: Fn(&Tensor<T>, &Tensor<T>, &[&Tensor<T>]) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = self.record && parents.iter().any(|p| nodes[p.id].requires_grad);
        nodes.push(Node {
            value: Arc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            backward: if requires_grad { Some(Box::new(backward)) } else { None },
            param: None,
            requires_grad,
        });
        Var {
            id: nodes.len() - 1,
            graph: self,
        }
    }

    pub(crate) fn push_buffer_update(&self, id: ParamId, value: Tensor<T>) {
        self.buffer_updates.borrow_mut().push((id, value));
    }

    /// Running-statistic updates produced by training-mode batch norm.
    pub fn take_buffer_updates(&self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut *self.buffer_updates.borrow_mut())
    }

    /// Reverse pass from a scalar (or any) node, seeded with ones.
    pub fn backward(&self, root: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.id).map(|_| None).collect();
        grads[root.id] = Some(Tensor::full(nodes[root.id].value.shape().to_vec(), T::one()));
        let mut out = Gradients {
            params: Vec::new(),
            leaves: HashMap::new(),
        };
        for i in (0..=root.id).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            match &node.backward {
                Some(bw) => {
                    let parent_values: Vec<&Tensor<T>> = node.parents.iter().map(|&p| &*nodes[p].value).collect();
                    let parent_grads = bw(&g, &node.value, &parent_values);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for (&p, pg) in node.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !nodes[p].requires_grad {
                            continue;
                        }
                        debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "gradient shape for node {p}");
                        match &mut grads[p] {
                            Some(acc) => acc.add_assign(&pg),
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
                None if node.parents.is_empty() && node.requires_grad => match node.param {
                    Some(pid) => out.params.push((pid, g)),
                    None => {
                        out.leaves.insert(i, g);
                    }
                },
                None => {}
            }
        }
        out
    }

    pub(crate) fn node_value(&self, id: usize) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    /// Shared handle to the node's value.
    pub fn value(&self) -> Arc<Tensor<T>> {
        self.graph.node_value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }
}

/// Gradients of one backward pass.
pub struct Gradients<T> {
    params: Vec<(ParamId, Tensor<T>)>,
    leaves: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn params(&self) -> &[(ParamId, Tensor<T>)] {
        &self.params
    }

    pub fn into_params(self) -> Vec<(ParamId, Tensor<T>)> {
        self.params
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    pub fn input(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.leaves.get(&v.id)
    }
}
