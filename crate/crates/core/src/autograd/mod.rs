//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and, when any
//! input requires a gradient, a closure mapping the output gradient to input
//! gradients. Kernels are coarse (whole convolutions, whole recurrences) so
//! the tape stays short and each backward rule is written out by hand.

mod kernels;
mod ops;
mod params;
mod seq;
mod spectral_ops;

pub use params::{Param, ParamId, ParamStore};

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    #[inline]
    pub fn index(self) -> usize {
        self.0
    }
}

/// Context handed to a backward rule.
pub(crate) struct Back<'a, T: Scalar> {
    pub grad: &'a Tensor<T>,
    pub out: &'a Tensor<T>,
    pub inputs: Vec<&'a Tensor<T>>,
    pub needs: Vec<bool>,
}

type BackwardFn<T> = Box<dyn Fn(&Back<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Scalar> {
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// A recording of one forward evaluation.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    record: bool,
    bound: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A graph that records backward rules.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
            bound: Vec::new(),
        }
    }

    /// A graph for pure evaluation; no backward rules or saved activations are kept.
    pub fn inference() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    #[inline]
    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: requires_grad && self.record,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    /// A free leaf whose gradient is reported by [`Graph::gradients`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// Binds a parameter; repeated calls with the same id return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.bound.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.push_leaf(store.value(id).clone(), true);
        self.bound.push((id, v));
        v
    }

    /// Appends an operation node. `backward` is only kept when some input needs a gradient.
    pub(crate) fn push_op<F>(&mut self, value: Tensor<T>, parents: &[Var], backward: F) -> Var
    where
        F: Fn(&Back<'_, T>) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let requires_grad = self.record && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: if requires_grad { Some(Box::new(backward)) } else { None },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// True when the op being built will need its backward rule.
    pub(crate) fn wants_grad(&self, parents: &[Var]) -> bool {
        self.record && parents.iter().any(|p| self.nodes[p.0].requires_grad)
    }

    /// Runs the reverse sweep from a scalar `loss` and returns the gradient of
    /// every node that requires one (indexed by `Var::index`).
    pub fn gradients(&self, loss: Var) -> Result<Vec<Option<Tensor<T>>>> {
        if self.value(loss).numel() != 1 {
            return invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let ctx = Back {
                grad: &grad,
                out: &node.value,
                inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                needs: node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect(),
            };
            let parent_grads = backward(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *slot = None;
            }
        }
        Ok(grads)
    }

    /// Backpropagates `loss` and adds `weight * dloss/dparam` into the store's gradient slots.
    pub fn backward_weighted(&self, loss: Var, store: &mut ParamStore<T>, weight: T) -> Result<()> {
        let grads = self.gradients(loss)?;
        for &(id, v) in &self.bound {
            if let Some(g) = &grads[v.0] {
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of {}", store.name(id))));
                }
                store.accumulate_grad(id, g, weight);
            }
        }
        Ok(())
    }

    /// Backpropagates `loss` into the store's gradient slots.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        self.backward_weighted(loss, store, T::one())
    }
}

#[cfg(test)]
mod tests;
