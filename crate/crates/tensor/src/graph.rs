//! Tape-style reverse-mode autodiff.
//!
//! Nodes are appended in creation order, so the node vector is already a
//! topological order; backward walks it once in reverse.

use crate::array::Array;
use crate::error::{Result, TensorError};
use crate::scalar::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Local backward rule: `(upstream grad, parent values, own value) -> grad per parent`.
pub type BackwardFn<T> = Box<dyn Fn(&Array<T>, &[&Array<T>], &Array<T>) -> Vec<Option<Array<T>>>>;

struct Node<T: Scalar> {
    op: &'static str,
    value: Array<T>,
    grad: Option<Array<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    leaf: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// New graph. Non-finite checks are on in debug builds.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Array<T>) -> Var {
        self.leaf(value, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Array<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: T) -> Var {
        self.constant(Array::scalar(value))
    }

    fn leaf(&mut self, value: Array<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: "leaf",
            value,
            grad: None,
            parents: Vec::new(),
            backward: None,
            requires_grad,
            leaf: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a trainable leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&Array<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Records an op node. Used by every primitive and open to callers that
    /// need a fused op with a hand-written backward rule.
    pub fn custom(
        &mut self,
        op: &'static str,
        parents: &[Var],
        value: Array<T>,
        backward: BackwardFn<T>,
    ) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(TensorError::NonFinite { op });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
            leaf: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Backpropagates from a scalar node, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(TensorError::NonScalar(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(TensorError::NoGraph);
        }
        let mut grads: Vec<Option<Array<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Array::ones(root.value.shape()));
        let mut leaf_grads = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.leaf {
                leaf_grads.push((i, g));
                continue;
            }
            let Some(bw) = node.backward.as_ref() else { continue };
            let parents: Vec<&Array<T>> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let pgrads = bw(&g, &parents, &node.value);
            debug_assert_eq!(pgrads.len(), node.parents.len(), "{}: backward arity", node.op);
            for (&p, pg) in node.parents.iter().zip(pgrads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(
                    pg.shape(),
                    self.nodes[p].value.shape(),
                    "{}: gradient shape for parent {}",
                    node.op,
                    self.nodes[p].op
                );
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }

        for (i, g) in leaf_grads {
            match &mut self.nodes[i].grad {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }
}
