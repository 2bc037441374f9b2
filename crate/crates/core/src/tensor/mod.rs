//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Differentiation is define-by-run: every operation executed through a
//! [`Tape`] records a node, and [`Tape::backward`] replays the records in
//! exact reverse order. Tensors are immutable once created; a [`Tensor`] is a
//! cheap handle into the tape that produced it.
//!
//! Every public operation checks its output for NaN/Inf and fails instead of
//! propagating silently. All loops run in a fixed order, so identical inputs
//! yield bit-identical outputs run to run.

pub mod backward;
pub mod ops;
pub mod shape;

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};

/// Scalar element type of the tensor core. 64-bit by default; the `f32`
/// feature flips the whole crate to single precision.
#[cfg(feature = "f32")]
pub type Real = f32;
#[cfg(not(feature = "f32"))]
pub type Real = f64;

pub const REAL_DTYPE: &str = if cfg!(feature = "f32") { "f32" } else { "f64" };

pub const LN_2PI: Real = 1.837877066409345483560659472811_f64 as Real;

/// Additive mask value standing in for -inf: large enough that `exp` of any
/// masked score underflows to zero, small enough to stay finite.
pub const MASK_NEG: Real = -1.0e30 as Real;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Tensor(pub(crate) usize);

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    Matmul(Tensor, Tensor),
    Neg(Tensor),
    Exp(Tensor),
    Log(Tensor),
    Sqrt(Tensor),
    Gelu(Tensor),
    Softplus(Tensor),
    Scale(Tensor, Real),
    AddScalar(Tensor),
    Softmax { x: Tensor, axis: usize },
    LogSumExp { x: Tensor, axis: usize },
    LayerNorm { x: Tensor, gain: Tensor, bias: Tensor, eps: Real },
    SumAxis { x: Tensor, axis: usize },
    SumAll(Tensor),
    MeanAll(Tensor),
    GatherRows { x: Tensor, indices: Vec<usize> },
    Concat { parts: Vec<Tensor>, axis: usize },
    Slice { x: Tensor, axis: usize, start: usize },
    Reshape(Tensor),
    Permute { x: Tensor, perm: Vec<usize> },
}

pub(crate) struct Node {
    pub shape: Vec<usize>,
    pub data: Vec<Real>,
    pub requires_grad: bool,
    pub grad: Option<Vec<Real>>,
    pub op: Op,
}

/// Ordered record of executed differentiable operations.
pub struct Tape {
    pub(crate) nodes: RefCell<Vec<Node>>,
    backward_done: Cell<bool>,
    bound_params: RefCell<HashMap<usize, Tensor>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            backward_done: Cell::new(false),
            bound_params: RefCell::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push(
        &self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<Real>,
        requires_grad: bool,
        op: Op,
    ) -> Result<Tensor> {
        if self.backward_done.get() {
            return Err(Error::BackwardTwice);
        }
        debug_assert_eq!(shape::numel(&shape), data.len());
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { shape, data, requires_grad, grad: None, op });
        Ok(Tensor(nodes.len() - 1))
    }

    /// Inserts a non-differentiable value.
    pub fn constant(&self, shape: &[usize], data: Vec<Real>) -> Result<Tensor> {
        if shape::numel(shape) != data.len() {
            return Err(Error::shape(
                "constant",
                format!("shape {:?} holds {} elements, data has {}", shape, shape::numel(shape), data.len()),
            ));
        }
        self.push("constant", shape.to_vec(), data, false, Op::Leaf)
    }

    /// Inserts a differentiable leaf (used directly in tests; models bind
    /// leaves through [`Tape::param`]).
    pub fn leaf(&self, shape: &[usize], data: Vec<Real>) -> Result<Tensor> {
        if shape::numel(shape) != data.len() {
            return Err(Error::shape("leaf", format!("shape {:?} vs {} elements", shape, data.len())));
        }
        self.push("leaf", shape.to_vec(), data, true, Op::Leaf)
    }

    pub fn scalar_const(&self, v: Real) -> Result<Tensor> {
        self.constant(&[], vec![v])
    }

    pub fn zeros_const(&self, shape: &[usize]) -> Result<Tensor> {
        self.constant(shape, vec![0.0; shape::numel(shape)])
    }

    /// Binds a parameter from `store` as a differentiable leaf. Repeated
    /// binds of the same parameter return the same node, so gradients from
    /// every use accumulate in one place.
    pub fn param(&self, store: &ParamSet, id: ParamId) -> Result<Tensor> {
        if let Some(&t) = self.bound_params.borrow().get(&id.0) {
            return Ok(t);
        }
        let entry = store.entry(id);
        let t = self.push("param", entry.shape.clone(), entry.value.clone(), true, Op::Leaf)?;
        self.bound_params.borrow_mut().insert(id.0, t);
        Ok(t)
    }

    /// Gradient of a bound parameter after [`Tape::backward`].
    pub fn param_grad(&self, id: ParamId) -> Option<Vec<Real>> {
        let t = *self.bound_params.borrow().get(&id.0)?;
        self.grad_vec(t)
    }

    pub fn shape_of(&self, t: Tensor) -> Vec<usize> {
        self.nodes.borrow()[t.0].shape.clone()
    }

    pub fn numel(&self, t: Tensor) -> usize {
        shape::numel(&self.nodes.borrow()[t.0].shape)
    }

    pub fn data(&self, t: Tensor) -> Vec<Real> {
        self.nodes.borrow()[t.0].data.clone()
    }

    /// Borrowed view of a tensor's data (no copy).
    pub fn data_ref(&self, t: Tensor) -> Ref<'_, [Real]> {
        Ref::map(self.nodes.borrow(), |n| n[t.0].data.as_slice())
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes.borrow()[t.0].requires_grad
    }

    pub fn grad_vec(&self, t: Tensor) -> Option<Vec<Real>> {
        self.nodes.borrow()[t.0].grad.clone()
    }

    pub fn scalar(&self, t: Tensor) -> Result<Real> {
        let nodes = self.nodes.borrow();
        let n = &nodes[t.0];
        if shape::numel(&n.shape) != 1 {
            return Err(Error::NonScalarLoss(n.shape.clone()));
        }
        Ok(n.data[0])
    }

    /// Reverse pass from a scalar loss. Visits nodes in exact reverse
    /// recording order; running it twice on one tape is an error.
    pub fn backward(&self, loss: Tensor) -> Result<()> {
        if self.backward_done.get() {
            return Err(Error::BackwardTwice);
        }
        self.backward_done.set(true);
        {
            let nodes = self.nodes.borrow();
            let n = &nodes[loss.0];
            if shape::numel(&n.shape) != 1 {
                return Err(Error::NonScalarLoss(n.shape.clone()));
            }
            if !n.data[0].is_finite() {
                return Err(Error::NonFinite { op: "backward" });
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes[loss.0].grad = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !nodes[id].requires_grad || nodes[id].grad.is_none() {
                continue;
            }
            backward::dispatch(&mut nodes, id)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finiteness_is_enforced() {
        let t = Tape::new();
        let a = t.leaf(&[2], vec![1.0, -700.0]).unwrap();
        // exp(-700) underflows to 0 which is finite; exp(710) would overflow.
        let b = t.leaf(&[1], vec![710.0]).unwrap();
        assert!(t.exp(a).is_ok());
        assert!(matches!(t.exp(b), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn backward_twice_is_an_error() {
        let t = Tape::new();
        let a = t.leaf(&[2], vec![1.0, 2.0]).unwrap();
        let l = t.sum_all(a).unwrap();
        t.backward(l).unwrap();
        assert!(matches!(t.backward(l), Err(Error::BackwardTwice)));
        // Recording after backward is also rejected.
        assert!(matches!(t.exp(a), Err(Error::BackwardTwice)));
    }

    #[test]
    fn loss_must_be_scalar() {
        let t = Tape::new();
        let a = t.leaf(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(t.backward(a), Err(Error::NonScalarLoss(_))));
    }
}
