//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Operations append nodes to a [`Graph`]; each node stores its value, its
//! parent references and a backward rule mapping the output gradient to
//! parent gradients. `backward` walks the tape once in reverse creation
//! order (a reverse topological order by construction), which fixes the
//! gradient accumulation order and makes runs bit-reproducible.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Context handed to a backward rule.
pub struct BackCtx<'a, S: Scalar> {
    /// Gradient of the loss with respect to this node's output.
    pub out_grad: &'a Tensor<S>,
    /// The node's forward value.
    pub out_value: &'a Tensor<S>,
    /// Forward values of the node's parents, in parent order.
    pub inputs: &'a [&'a Tensor<S>],
    /// Which parents actually need a gradient; rules may skip the others.
    pub wants: &'a [bool],
}

type Rule<S> = Box<dyn Fn(&BackCtx<'_, S>) -> Vec<Option<Tensor<S>>>>;

struct Node<S: Scalar> {
    value: Tensor<S>,
    parents: Vec<Var>,
    rule: Option<Rule<S>>,
    requires_grad: bool,
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that never receives a gradient (inputs, masks, targets).
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.insert(value, Vec::new(), None, false)
    }

    /// Leaf that accumulates a gradient (model parameters).
    pub fn parameter(&mut self, value: Tensor<S>) -> Var {
        self.insert(value, Vec::new(), None, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Appends an interior node. The node requires a gradient iff any parent
    /// does; rules are dropped for all-constant subtrees.
    pub(crate) fn insert(
        &mut self,
        value: Tensor<S>,
        parents: Vec<Var>,
        rule: Option<Rule<S>>,
        leaf_requires: bool,
    ) -> Var {
        debug_assert!(
            value.all_finite(),
            "non-finite forward value (node {})",
            self.nodes.len()
        );
        let requires_grad =
            leaf_requires || parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let rule = if requires_grad { rule } else { None };
        self.nodes.push(Node {
            value,
            parents,
            rule,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar ([1]-shaped) node. Returns gradients for
    /// every node that required one; query leaves via [`Gradients::get`].
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.len() != 1 {
            return Err(Error::InvalidArgument {
                op: "backward",
                msg: format!(
                    "loss must be a scalar, got shape {:?}",
                    loss_node.value.shape()
                ),
            });
        }
        if !loss_node.value.item().is_finite() {
            return Err(Error::NonFinite { op: "backward" });
        }

        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(S::one()));

        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let node = &self.nodes[i];
            let Some(rule) = &node.rule else {
                continue; // leaf: gradient stays in place
            };
            let g = grads[i].take().expect("checked above");
            let inputs: Vec<&Tensor<S>> =
                node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let wants: Vec<bool> = node
                .parents
                .iter()
                .map(|p| self.nodes[p.0].requires_grad)
                .collect();
            let ctx = BackCtx {
                out_grad: &g,
                out_value: &node.value,
                inputs: &inputs,
                wants: &wants,
            };
            let parent_grads = rule(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), self.nodes[p.0].value.shape());
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }

        Ok(Gradients { grads })
    }
}

/// Gradients produced by one reverse pass.
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
