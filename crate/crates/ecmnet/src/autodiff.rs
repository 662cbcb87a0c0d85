//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass. Each recorded node
//! holds its result tensor and a backward closure that routes the incoming
//! gradient to the node's parents. [`Tape::backward`] replays the closures in
//! reverse order. With gradients disabled the tape stores values only, so
//! evaluation forwards carry no bookkeeping cost.

use std::cell::RefCell;

use crate::elem::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn<E> = Box<dyn FnOnce(&Tensor<E>, &mut Grads<E>)>;

struct Node<E> {
    value: Tensor<E>,
    back: Option<BackFn<E>>,
}

/// Records one forward pass.
pub struct Tape<E: Scalar> {
    nodes: RefCell<Vec<Node<E>>>,
    grad_enabled: bool,
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// A tape that stores values only; backward is unavailable.
    pub fn no_grad() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Insert an input node. Gradients w.r.t. leaves are retrievable from
    /// [`Grads`] after backward.
    pub fn leaf(&self, value: Tensor<E>) -> Var {
        self.record(value, None)
    }

    /// Insert a computed node with its backward closure. The closure receives
    /// the gradient of the loss w.r.t. this node's value and must accumulate
    /// gradients into the node's parents.
    pub fn push(
        &self,
        value: Tensor<E>,
        back: impl FnOnce(&Tensor<E>, &mut Grads<E>) + 'static,
    ) -> Var {
        if self.grad_enabled {
            self.record(value, Some(Box::new(back)))
        } else {
            self.record(value, None)
        }
    }

    fn record(&self, value: Tensor<E>, back: Option<BackFn<E>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, back });
        Var(nodes.len() - 1)
    }

    /// Value of a node (cheap shared clone).
    pub fn value(&self, v: Var) -> Tensor<E> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Reverse sweep seeding `d root / d root = 1`. The root must be a
    /// single-element tensor. Consumes the recorded closures; a second
    /// backward over the same tape panics.
    pub fn backward(&self, root: Var) -> Grads<E> {
        assert!(
            self.grad_enabled,
            "backward called on a no-grad tape"
        );
        let mut nodes = self.nodes.borrow_mut();
        assert_eq!(
            nodes[root.0].value.numel(),
            1,
            "backward root must be a scalar, got shape {:?}",
            nodes[root.0].value.shape()
        );
        let mut grads = Grads {
            slots: vec![None; nodes.len()],
        };
        grads.slots[root.0] = Some(Tensor::full(nodes[root.0].value.shape(), E::ONE));
        for idx in (0..=root.0).rev() {
            let Some(grad) = grads.slots[idx].clone() else {
                continue;
            };
            if let Some(back) = nodes[idx].back.take() {
                back(&grad, &mut grads);
            }
        }
        grads
    }
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient buffer indexed by tape node.
pub struct Grads<E> {
    slots: Vec<Option<Tensor<E>>>,
}

impl<E: Scalar> Grads<E> {
    /// Accumulate `g` into the slot for `v`.
    pub fn add(&mut self, v: Var, g: Tensor<E>) {
        match &mut self.slots[v.0] {
            Some(existing) => existing.accumulate(&g),
            slot @ None => *slot = Some(g),
        }
    }

    pub fn get(&self, v: Var) -> Option<&Tensor<E>> {
        self.slots[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<E>> {
        self.slots[v.0].take()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;

    #[test]
    fn backward_of_sum_of_product_matches_hand_gradient() {
        // f = sum(x * y); df/dx = y, df/dy = x
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]));
        let y = tape.leaf(Tensor::new(&[3], vec![4.0, 5.0, 6.0]));
        let p = ops::mul(&tape, x, y);
        let s = ops::sum_all(&tape, p);
        let mut grads = tape.backward(s);
        assert_eq!(grads.take(x).unwrap().data(), &[4.0, 5.0, 6.0]);
        assert_eq!(grads.take(y).unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn diamond_graph_accumulates_both_paths() {
        // f = sum(x + x) => df/dx = 2
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::new(&[2], vec![1.0, -1.0]));
        let y = ops::add(&tape, x, x);
        let s = ops::sum_all(&tape, y);
        let mut grads = tape.backward(s);
        assert_eq!(grads.take(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn no_grad_tape_records_values_only() {
        let tape: Tape<f32> = Tape::no_grad();
        let x = tape.leaf(Tensor::full(&[4], 2.0));
        let y = ops::relu(&tape, x);
        assert_eq!(tape.value(y).data(), &[2.0; 4]);
    }
}
