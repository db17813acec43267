//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheap handle to an immutable node of a dynamically built
//! computation graph. Every operation that has at least one input with
//! `requires_grad` records its inputs; [`Tensor::backward`] walks the graph in
//! reverse topological order and accumulates gradients into every reachable
//! node that requires them.
//!
//! Graphs are single-threaded (`Rc`-based). Independent graphs may live on
//! different threads as long as they share no tensors.

mod autograd;
pub mod kernels;
mod ops;

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

pub use self::ops::ElemOp;
use self::autograd::Op;
use crate::error::{shape_err, Error, Result};
use crate::Scalar;

pub struct Tensor<T: Scalar>(Rc<Node<T>>);

pub(crate) struct Node<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
    op: Op<T>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &self.0.data)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    /// Builds a leaf tensor. Fails if `data.len()` differs from the shape's
    /// element count or a dimension is zero.
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if shape.contains(&0) {
            return shape_err(format!("zero-sized dimension in {shape:?}"));
        }
        if data.len() != numel(shape) {
            return shape_err(format!(
                "data length {} does not match shape {shape:?}",
                data.len()
            ));
        }
        Ok(Self::leaf(data, shape.to_vec(), false))
    }

    /// Builds a leaf tensor that records gradients.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Ok(Self::new(data, shape)?.with_requires_grad(true))
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::new(data.iter().map(|&v| T::lit(v)).collect(), shape)
    }

    pub fn scalar(v: T) -> Self {
        Self::leaf(vec![v], Vec::new(), false)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::leaf(vec![v; numel(shape)], shape.to_vec(), false)
    }

    pub(crate) fn leaf(data: Vec<T>, shape: Vec<usize>, requires_grad: bool) -> Self {
        debug_assert_eq!(data.len(), numel(&shape));
        Tensor(Rc::new(Node {
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            op: Op::Leaf,
        }))
    }

    /// Creates the result node of an operation. The op (and with it the
    /// references to its inputs) is only kept when a gradient can flow.
    pub(crate) fn from_op(data: Vec<T>, shape: Vec<usize>, op: Op<T>) -> Self {
        debug_assert_eq!(data.len(), numel(&shape));
        let requires_grad = op.inputs().iter().any(|t| t.requires_grad());
        let op = if requires_grad { op } else { Op::Leaf };
        Tensor(Rc::new(Node {
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            op,
        }))
    }

    /// Returns a tensor with the given gradient flag. Reuses the buffer when
    /// this handle is the only owner.
    pub fn with_requires_grad(self, flag: bool) -> Self {
        match Rc::try_unwrap(self.0) {
            Ok(node) if node.op.is_leaf() => Self::leaf(node.data, node.shape, flag),
            Ok(node) => Self::leaf(node.data, node.shape, flag),
            Err(rc) => Self::leaf(rc.data.clone(), rc.shape.clone(), flag),
        }
    }

    /// A new leaf holding a copy of the values, cut off from the graph.
    pub fn detach(&self) -> Self {
        Self::leaf(self.0.data.clone(), self.0.shape.clone(), false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_leaf()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return shape_err(format!("item() on tensor of shape {:?}", self.shape()));
        }
        Ok(self.0.data[0])
    }

    /// The accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn grad_ref(&self) -> Ref<'_, Option<Vec<T>>> {
        self.0.grad.borrow()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub fn ptr_eq(&self, other: &Self) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn accumulate_grad(&self, f: impl FnOnce(&mut [T])) {
        let mut slot = self.0.grad.borrow_mut();
        let buf = slot.get_or_insert_with(|| vec![T::zero(); self.0.data.len()]);
        f(buf);
    }

    /// Back-propagates from this scalar loss. Leaf gradients accumulate across
    /// calls; gradients of intermediate nodes are recomputed on each call.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward() requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        for t in &order {
            if !t.is_leaf() {
                t.zero_grad();
            }
        }
        self.accumulate_grad(|g| g[0] += T::one());
        for t in order.iter().rev() {
            let grad = t.0.grad.borrow();
            if let Some(g) = grad.as_ref() {
                t.0.op.propagate(t, g);
            }
        }
        Ok(())
    }

    /// Post-order (inputs before consumers) of all grad-requiring ancestors.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut seen: HashSet<*const Node<T>> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(Rc::as_ptr(&t.0)) {
                continue;
            }
            stack.push((t.clone(), true));
            for input in t.0.op.inputs().into_iter().rev() {
                if input.requires_grad() && !seen.contains(&Rc::as_ptr(&input.0)) {
                    stack.push((input.clone(), false));
                }
            }
        }
        order
    }
}
