//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The graph is built per forward pass (define-by-run): every op whose
//! operands include a differentiable tensor records itself in the result,
//! and [`backward`] walks the recorded ops in reverse topological order.
//! Values are immutable after creation; only gradient accumulators mutate.

mod autograd;
mod gradcheck;
mod kernels;
mod ops;
mod param;

pub use autograd::backward;
pub use gradcheck::{finite_diff_check, param_grad_check, relative_error, GradCheckReport};
pub use ops::concat;
pub use param::{ParamSet, Parameter};

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::Real;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Provenance of a tensor: the op that produced it and its operands.
#[derive(Clone)]
pub(crate) enum Op {
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Matmul(Tensor, Tensor),
    Scale(Tensor, Real),
    AddScalar(Tensor, Real),
    Concat(Vec<Tensor>, usize),
    Slice {
        input: Tensor,
        axis: usize,
        start: usize,
        len: usize,
    },
    MeanAxis {
        input: Tensor,
        axis: usize,
    },
    MeanAll(Tensor),
    SumAll(Tensor),
    Sigmoid(Tensor),
    Gelu(Tensor),
    SoftmaxLast(Tensor),
    LayerNormLast {
        input: Tensor,
        eps: Real,
    },
    Reshape(Tensor),
    Permute {
        input: Tensor,
        axes: Vec<usize>,
    },
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<&Tensor> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) => vec![a, b],
            Op::Scale(a, _) | Op::AddScalar(a, _) => vec![a],
            Op::Concat(parts, _) => parts.iter().collect(),
            Op::Slice { input, .. }
            | Op::MeanAxis { input, .. }
            | Op::MeanAll(input)
            | Op::SumAll(input)
            | Op::Sigmoid(input)
            | Op::Gelu(input)
            | Op::SoftmaxLast(input)
            | Op::LayerNormLast { input, .. }
            | Op::Reshape(input)
            | Op::Permute { input, .. } => vec![input],
        }
    }
}

pub(crate) struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Rc<Vec<Real>>,
    grad: RefCell<Option<Vec<Real>>>,
    requires_grad: bool,
    op: Op,
}

/// A dense n-dimensional array of reals, row-major, cheap to clone.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Rc<Inner>,
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Rc<Vec<Real>>, requires_grad: bool, op: Op) -> Tensor {
        debug_assert_eq!(kernels::numel(&shape), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                grad: RefCell::new(None),
                requires_grad,
                op,
            }),
        }
    }

    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<Real>, op: Op) -> Tensor {
        let requires_grad = op.parents().iter().any(|p| p.requires_grad());
        let op = if requires_grad { op } else { Op::Leaf };
        Tensor::build(shape, Rc::new(data), requires_grad, op)
    }

    /// Non-differentiable tensor from raw data.
    pub fn new(shape: &[usize], data: Vec<Real>) -> Result<Tensor> {
        if kernels::numel(shape) != data.len() {
            return Err(Error::ShapeMismatch {
                op: "new",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor::build(shape.to_vec(), Rc::new(data), false, Op::Leaf))
    }

    /// Differentiable leaf: receives a gradient during [`backward`].
    pub fn leaf(shape: &[usize], data: Vec<Real>) -> Result<Tensor> {
        let t = Tensor::new(shape, data)?;
        Ok(Tensor::build(
            t.inner.shape.clone(),
            Rc::clone(&t.inner.data),
            true,
            Op::Leaf,
        ))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::build(
            shape.to_vec(),
            Rc::new(vec![0.0; kernels::numel(shape)]),
            false,
            Op::Leaf,
        )
    }

    pub fn full(shape: &[usize], value: Real) -> Tensor {
        Tensor::build(
            shape.to_vec(),
            Rc::new(vec![value; kernels::numel(shape)]),
            false,
            Op::Leaf,
        )
    }

    pub fn scalar(value: Real) -> Tensor {
        Tensor::full(&[1], value)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[Real] {
        &self.inner.data
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Accumulated gradient, if any backward pass has reached this tensor.
    pub fn grad(&self) -> Option<Vec<Real>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[Real]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, &v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> Real {
        debug_assert_eq!(self.numel(), 1);
        self.inner.data[0]
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}
