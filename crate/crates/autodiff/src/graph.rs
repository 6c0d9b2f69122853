//! Append-only tape of operations and the reverse sweep over it.

use std::collections::HashMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{AutodiffError, Result};
use crate::ops::Op;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

pub(crate) struct Node<T: Scalar> {
    pub op: Op<T>,
    pub inputs: Vec<NodeId>,
    pub value: Tensor<T>,
    pub requires_grad: bool,
}

/// Define-by-run computation graph.
///
/// Every operation is evaluated as soon as it is recorded, so building the
/// graph *is* the forward pass. Nodes only ever refer to earlier nodes, which
/// makes the tape topologically ordered by construction. Stochastic nodes draw
/// from a generator owned by the graph and seeded at creation.
pub struct Graph<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
    names: HashMap<String, NodeId>,
    grads: Vec<Option<Tensor<T>>>,
    pub(crate) rng: ChaCha8Rng,
}

impl<T: Scalar> Graph<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            names: HashMap::new(),
            grads: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Named leaf that does not receive a gradient.
    pub fn input(&mut self, name: &str, value: Tensor<T>) -> Result<NodeId> {
        self.named_leaf(name, value, false)
    }

    /// Named leaf that receives a gradient on [`backward`](Self::backward).
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Result<NodeId> {
        self.named_leaf(name, value, true)
    }

    /// Unnamed leaf without gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.leaf(value, false)
    }

    fn named_leaf(&mut self, name: &str, value: Tensor<T>, requires_grad: bool) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite {
                node: format!("input `{name}`"),
            });
        }
        let id = self.leaf(value, requires_grad)?;
        self.names.insert(name.to_string(), id);
        Ok(id)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite {
                node: format!("leaf {}", NodeId(self.nodes.len())),
            });
        }
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Looks up a named leaf.
    pub fn node(&self, name: &str) -> Result<NodeId> {
        self.names
            .get(name)
            .copied()
            .ok_or_else(|| AutodiffError::UnknownInput(name.to_string()))
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient accumulated by the last [`backward`](Self::backward) call.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    pub(crate) fn describe(&self, id: NodeId) -> String {
        format!("node {} ({})", id, self.nodes[id.0].op.name())
    }

    /// Describes the node that the next [`push`](Self::push) will create.
    pub(crate) fn next_name(&self, op: &str) -> String {
        format!("node {} ({op})", NodeId(self.nodes.len()))
    }

    pub(crate) fn push(&mut self, op: Op<T>, inputs: Vec<NodeId>, value: Tensor<T>) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite {
                node: self.next_name(op.name()),
            });
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Reverse sweep from a single-element output. Gradients of every node
    /// that depends on a parameter are kept and readable through
    /// [`grad`](Self::grad); contributions along multiple paths are summed.
    pub fn backward(&mut self, output: NodeId) -> Result<()> {
        let out = &self.nodes[output.0];
        if out.value.numel() != 1 {
            return Err(AutodiffError::NotScalar(out.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(out.value.shape(), T::one()));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(gout) = grads[idx].as_ref() else {
                continue;
            };
            let contributions = self.vjp(NodeId(idx), gout.data());
            debug_assert_eq!(contributions.len(), node.inputs.len());
            for (input, contribution) in node.inputs.iter().zip(contributions) {
                let Some(contribution) = contribution else {
                    continue;
                };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(&contribution) {
                            *a = *a + *c;
                        }
                    }
                    slot @ None => {
                        let shape = self.nodes[input.0].value.shape().to_vec();
                        *slot = Some(Tensor::from_parts(shape, contribution));
                    }
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Whether input `pos` of `id` needs a gradient contribution.
    pub(crate) fn wants(&self, id: NodeId, pos: usize) -> bool {
        self.nodes[self.nodes[id.0].inputs[pos].0].requires_grad
    }

    pub(crate) fn input_value(&self, id: NodeId, pos: usize) -> &Tensor<T> {
        &self.nodes[self.nodes[id.0].inputs[pos].0].value
    }
}
