//! Tape-based reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] owns every node created while evaluating an expression. Nodes
//! are appended in creation order, so the node list is already a topological
//! order and [`Graph::backward`] simply walks it in reverse. [`Tensor`] is a
//! cheap copyable handle into the graph.
//!
//! ```
//! use uda_core::autodiff::Graph;
//!
//! let g = Graph::new();
//! let x = g.leaf(vec![1.0, 2.0], &[2]).unwrap();
//! let loss = x.mul(x).unwrap().sum();
//! g.backward(loss).unwrap();
//! assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
//! ```

mod ops;

use std::cell::{Ref, RefCell};
use std::fmt;

use crate::error::{Error, Result};

pub(crate) use ops::Op;

/// Lower clamp applied to probabilities before they enter a logarithm.
pub const PROB_EPS: f64 = 1e-8;

pub(crate) struct Node {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Vec<f64>,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
    /// Accumulated gradient; only populated for trainable leaves.
    pub(crate) grad: Option<Vec<f64>>,
}

/// Recorded computation. Single-threaded; independent graphs may live on
/// different threads.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Tensor<'g> {
    graph: &'g Graph,
    id: usize,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Trainable leaf: gradients accumulate into it on every backward pass.
    pub fn leaf(&self, values: Vec<f64>, shape: &[usize]) -> Result<Tensor<'_>> {
        self.input(values, shape, true)
    }

    /// Constant input that never receives a gradient.
    pub fn constant(&self, values: Vec<f64>, shape: &[usize]) -> Result<Tensor<'_>> {
        self.input(values, shape, false)
    }

    pub fn scalar(&self, value: f64) -> Tensor<'_> {
        self.push(vec![1], vec![value], Op::Leaf, false)
    }

    fn input(&self, values: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Tensor<'_>> {
        if shape.contains(&0) || numel(shape) != values.len() {
            return Err(Error::BadShape {
                len: values.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(self.push(shape.to_vec(), values, Op::Leaf, requires_grad))
    }

    pub(crate) fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Tensor<'_> {
        debug_assert_eq!(numel(&shape), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Tensor {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaves in creation order.
    pub fn leaves(&self) -> Vec<Tensor<'_>> {
        self.nodes
            .borrow()
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf) && n.requires_grad)
            .map(|(id, _)| Tensor { graph: self, id })
            .collect()
    }

    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    /// Propagates d`loss`/d(node) back to every trainable leaf, adding to
    /// whatever gradient the leaf already holds.
    pub fn backward(&self, loss: Tensor<'_>) -> Result<()> {
        assert!(std::ptr::eq(self, loss.graph), "loss belongs to another graph");
        let leaf_grads = {
            let nodes = self.nodes.borrow();
            let root = &nodes[loss.id];
            if root.value.len() != 1 {
                return Err(Error::NotScalar(root.shape.clone()));
            }
            let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
            grads[loss.id] = Some(vec![1.0]);
            let mut leaf_grads = Vec::new();
            for id in (0..=loss.id).rev() {
                let Some(upstream) = grads[id].take() else {
                    continue;
                };
                let node = &nodes[id];
                if !node.requires_grad {
                    continue;
                }
                if let Op::Leaf = node.op {
                    leaf_grads.push((id, upstream));
                    continue;
                }
                for (parent, contribution) in node.op.backward(&nodes, node, &upstream) {
                    if !nodes[parent].requires_grad {
                        continue;
                    }
                    match &mut grads[parent] {
                        Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                        slot @ None => *slot = Some(contribution),
                    }
                }
            }
            leaf_grads
        };
        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in leaf_grads {
            match &mut nodes[id].grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

impl<'g> Tensor<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.graph.nodes.borrow()[self.id].value.len()
    }

    pub fn values(&self) -> Ref<'g, [f64]> {
        Ref::map(self.graph.nodes.borrow(), |n| n[self.id].value.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.values().to_vec()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let v = self.values();
        assert_eq!(v.len(), 1, "item() on a tensor with {} elements", v.len());
        v[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Gradient accumulated by the last backward passes; `None` before any
    /// pass reached this leaf.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.graph.nodes.borrow()[self.id].grad.clone()
    }

    /// Gradient, or zeros if nothing reached this leaf.
    pub fn grad_or_zeros(&self) -> Vec<f64> {
        self.grad().unwrap_or_else(|| vec![0.0; self.numel()])
    }
}

impl fmt::Debug for Tensor<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes = self.graph.nodes.borrow();
        let node = &nodes[self.id];
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &node.shape)
            .field("requires_grad", &node.requires_grad)
            .finish()
    }
}
