//! Reverse-mode autodiff over `ndarray` tensors.
//!
//! A [`Graph`] is a define-by-run tape: every op appends a node holding the
//! forward value plus a closure that maps the node's cotangent to its
//! parents' cotangents. [`Graph::backward`] walks the tape in reverse from a
//! scalar root. Nodes only reference earlier nodes, so reverse index order is
//! a valid reverse topological order.
//!
//! Closures read bulk forward values back out of the tape instead of cloning
//! them; only small auxiliary caches (im2col buffers, inverse stddevs) are
//! captured.

mod checking;
mod conv;
mod ops;

pub use checking::{check_gradients, FdCheck, FdIssue, DEFAULT_FD_STEP};
pub use conv::{bilinear_resize, conv2d, Conv2dSpec};
pub use ops::*;

use ndarray::ArrayD;

use crate::element::Element;
use crate::error::{Result, SrwError};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Read-only view of the tape's forward values, handed to backward closures.
pub struct Values<'g, A: Element> {
    nodes: &'g [Node<A>],
}

impl<'g, A: Element> Values<'g, A> {
    pub fn value(&self, v: Var) -> &ArrayD<A> {
        &self.nodes[v.0].value
    }
}

type BackFn<A> =
    Box<dyn Fn(&Values<'_, A>, &ArrayD<A>, &[bool]) -> Vec<Option<ArrayD<A>>> + Send + Sync>;

struct BackStep<A: Element> {
    parents: Vec<Var>,
    func: BackFn<A>,
}

struct Node<A: Element> {
    value: ArrayD<A>,
    requires_grad: bool,
    back: Option<BackStep<A>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
///
/// Only leaf nodes (constants do not count) retain gradients; interior
/// cotangents are dropped as soon as they have been propagated.
pub struct Gradients<A: Element> {
    grads: Vec<Option<ArrayD<A>>>,
}

impl<A: Element> Gradients<A> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<A>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<A>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Define-by-run tape.
pub struct Graph<A: Element> {
    nodes: Vec<Node<A>>,
}

impl<A: Element> Default for Graph<A> {
    fn default() -> Self {
        Self::new()
    }
}

impl<A: Element> Graph<A> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn with_capacity(n: usize) -> Self {
        Graph { nodes: Vec::with_capacity(n) }
    }

    /// Number of nodes on the tape.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a node that never receives gradients.
    pub fn constant(&mut self, value: ArrayD<A>) -> Var {
        self.insert(value, false, None)
    }

    /// Adds a rank-0 constant.
    pub fn scalar_constant(&mut self, value: A) -> Var {
        self.constant(ndarray::arr0(value).into_dyn())
    }

    /// Adds a differentiable leaf (parameter or probed input).
    pub fn leaf(&mut self, value: ArrayD<A>) -> Var {
        self.insert(value, true, None)
    }

    pub fn value(&self, v: Var) -> &ArrayD<A> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Value of a rank-0 (or single-element) node.
    pub fn scalar_value(&self, v: Var) -> A {
        let val = &self.nodes[v.0].value;
        debug_assert_eq!(val.len(), 1, "scalar_value on non-scalar node");
        *val.iter().next().expect("empty node value")
    }

    /// Index the next inserted node will get; lets ops reference their own
    /// output from inside the backward closure.
    pub(crate) fn next_id(&self) -> Var {
        Var(self.nodes.len())
    }

    pub(crate) fn push_op(&mut self, value: ArrayD<A>, parents: Vec<Var>, func: BackFn<A>) -> Var {
        let requires = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let back = requires.then_some(BackStep { parents, func });
        self.insert(value, requires, back)
    }

    fn insert(&mut self, value: ArrayD<A>, requires_grad: bool, back: Option<BackStep<A>>) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node { value, requires_grad, back });
        Var(id)
    }

    /// Reverse pass from a scalar root. Returns gradients for every
    /// differentiable leaf that the root depends on.
    pub fn backward(&self, root: Var) -> Result<Gradients<A>> {
        let root_node = &self.nodes[root.0];
        if root_node.value.len() != 1 {
            return Err(SrwError::Validation(format!(
                "backward root must be scalar, got shape {:?}",
                root_node.value.shape()
            )));
        }
        if !root_node.requires_grad {
            return Err(SrwError::Validation(
                "backward root does not depend on any differentiable leaf".into(),
            ));
        }
        let mut grads: Vec<Option<ArrayD<A>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(ArrayD::ones(root_node.value.raw_dim()));

        let values = Values { nodes: &self.nodes };
        for i in (0..=root.0).rev() {
            if grads[i].is_none() {
                continue;
            }
            let node = &self.nodes[i];
            let Some(step) = &node.back else { continue };
            let grad_out = grads[i].take().expect("grad checked above");
            let needs: Vec<bool> =
                step.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect();
            let parts = (step.func)(&values, &grad_out, &needs);
            debug_assert_eq!(parts.len(), step.parents.len());
            for (parent, part) in step.parents.iter().zip(parts) {
                let Some(part) = part else { continue };
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(
                    part.shape(),
                    self.nodes[parent.0].value.shape(),
                    "gradient shape mismatch for node {}",
                    parent.0
                );
                match &mut grads[parent.0] {
                    Some(acc) => *acc += &part,
                    slot @ None => *slot = Some(part),
                }
            }
        }
        Ok(Gradients { grads })
    }
}
