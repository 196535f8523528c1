//! Forward ops. Each checks operand shapes, computes the result, and
//! records provenance when any operand is differentiable.

use super::kernels;
use super::{Op, Tensor};
use crate::error::{Error, Result};
use crate::Real;

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl Tensor {
    fn binop(
        &self,
        other: &Tensor,
        name: &'static str,
        f: impl Fn(Real, Real) -> Real,
        op: impl Fn(Tensor, Tensor) -> Op,
    ) -> Result<Tensor> {
        let out_shape = kernels::broadcast_shape(self.shape(), other.shape())
            .ok_or_else(|| shape_err(name, self.shape(), other.shape()))?;
        let data = kernels::broadcast_binop(
            self.data(),
            self.shape(),
            other.data(),
            other.shape(),
            &out_shape,
            f,
        );
        Ok(Tensor::from_op(out_shape, data, op(self.clone(), other.clone())))
    }

    /// Elementwise sum with right-aligned broadcasting.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binop(other, "add", |a, b| a + b, Op::Add)
    }

    /// Elementwise difference with right-aligned broadcasting.
    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binop(other, "sub", |a, b| a - b, Op::Sub)
    }

    /// Hadamard product with right-aligned broadcasting.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binop(other, "mul", |a, b| a * b, Op::Mul)
    }

    /// Multiply by a constant.
    pub fn scale(&self, c: Real) -> Result<Tensor> {
        let data = self.data().iter().map(|&x| x * c).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Scale(self.clone(), c),
        ))
    }

    /// Add a constant.
    pub fn add_scalar(&self, c: Real) -> Result<Tensor> {
        let data = self.data().iter().map(|&x| x + c).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::AddScalar(self.clone(), c),
        ))
    }

    /// Matrix multiply over the last two axes.
    ///
    /// Either both operands have equal leading (batch) dims, or the right
    /// operand is rank-2 and shared across the left operand's leading dims.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (a_shape, b_shape) = (self.shape(), other.shape());
        if a_shape.len() < 2 || b_shape.len() < 2 {
            return Err(shape_err("matmul", a_shape, b_shape));
        }
        let (m, k) = (a_shape[a_shape.len() - 2], a_shape[a_shape.len() - 1]);
        let (kb, n) = (b_shape[b_shape.len() - 2], b_shape[b_shape.len() - 1]);
        if k != kb {
            return Err(shape_err("matmul", a_shape, b_shape));
        }
        let b_batched = b_shape.len() > 2;
        if b_batched && a_shape[..a_shape.len() - 2] != b_shape[..b_shape.len() - 2] {
            return Err(shape_err("matmul", a_shape, b_shape));
        }
        let batch: usize = a_shape[..a_shape.len() - 2].iter().product();
        let data = kernels::matmul(self.data(), other.data(), batch, m, k, n, b_batched);
        let mut out_shape = a_shape[..a_shape.len() - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);
        Ok(Tensor::from_op(
            out_shape,
            data,
            Op::Matmul(self.clone(), other.clone()),
        ))
    }

    /// Slice `len` indices starting at `start` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(shape_err("slice", shape, &[axis, start, len]));
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let src_block = shape[axis] * inner;
        let dst_block = len * inner;
        let mut data = vec![0.0; outer * dst_block];
        for o in 0..outer {
            let src = &self.data()[o * src_block + start * inner..o * src_block + (start + len) * inner];
            data[o * dst_block..(o + 1) * dst_block].copy_from_slice(src);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        Ok(Tensor::from_op(
            out_shape,
            data,
            Op::Slice {
                input: self.clone(),
                axis,
                start,
                len,
            },
        ))
    }

    /// Mean along `axis`; the axis is dropped from the result shape.
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(shape_err("mean_axis", shape, &[axis]));
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let extent = shape[axis];
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..extent {
                let src = &self.data()[(o * extent + a) * inner..(o * extent + a + 1) * inner];
                let dst = &mut data[o * inner..(o + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let inv = 1.0 / extent as Real;
        for d in data.iter_mut() {
            *d *= inv;
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        Ok(Tensor::from_op(
            out_shape,
            data,
            Op::MeanAxis {
                input: self.clone(),
                axis,
            },
        ))
    }

    /// Mean over all elements; result has shape `[1]`.
    pub fn mean_all(&self) -> Result<Tensor> {
        let n = self.numel() as Real;
        let v = self.data().iter().sum::<Real>() / n;
        Ok(Tensor::from_op(vec![1], vec![v], Op::MeanAll(self.clone())))
    }

    /// Sum over all elements; result has shape `[1]`.
    pub fn sum_all(&self) -> Result<Tensor> {
        let v = self.data().iter().sum::<Real>();
        Ok(Tensor::from_op(vec![1], vec![v], Op::SumAll(self.clone())))
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        let data = self.data().iter().map(|&x| kernels::sigmoid(x)).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Sigmoid(self.clone()),
        ))
    }

    /// Smooth FFN activation (tanh-form Gaussian-error linear unit).
    pub fn gelu(&self) -> Result<Tensor> {
        let data = self.data().iter().map(|&x| kernels::gelu(x)).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Gelu(self.clone()),
        ))
    }

    /// Softmax along the last axis (max-subtracted).
    pub fn softmax_last(&self) -> Result<Tensor> {
        let last = *self
            .shape()
            .last()
            .ok_or_else(|| shape_err("softmax", self.shape(), &[]))?;
        let data = kernels::softmax_last(self.data(), last);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::SoftmaxLast(self.clone()),
        ))
    }

    /// Zero-mean unit-variance normalization of the last axis (no affine).
    pub fn layer_norm_last(&self, eps: Real) -> Result<Tensor> {
        let last = *self
            .shape()
            .last()
            .ok_or_else(|| shape_err("layer_norm", self.shape(), &[]))?;
        let data = kernels::layer_norm_last(self.data(), last, eps);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::LayerNormLast {
                input: self.clone(),
                eps,
            },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if kernels::numel(shape) != self.numel() {
            return Err(shape_err("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.data().to_vec(),
            Op::Reshape(self.clone()),
        ))
    }

    /// Reorder axes; `axes` is a permutation of `0..rank`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(shape_err("permute", self.shape(), axes));
        }
        let data = kernels::permute(self.data(), self.shape(), axes);
        let out_shape = axes.iter().map(|&a| self.shape()[a]).collect();
        Ok(Tensor::from_op(
            out_shape,
            data,
            Op::Permute {
                input: self.clone(),
                axes: axes.to_vec(),
            },
        ))
    }

    /// Swap the last two axes.
    pub fn transpose_last2(&self) -> Result<Tensor> {
        let rank = self.rank();
        if rank < 2 {
            return Err(shape_err("transpose", self.shape(), &[]));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(&axes)
    }
}

/// Concatenate tensors along `axis`. All other extents must match.
pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| shape_err("concat", &[], &[axis]))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(shape_err("concat", first.shape(), &[axis]));
    }
    let mut axis_total = 0;
    for p in parts {
        if p.rank() != rank {
            return Err(shape_err("concat", first.shape(), p.shape()));
        }
        for d in 0..rank {
            if d != axis && p.shape()[d] != first.shape()[d] {
                return Err(shape_err("concat", first.shape(), p.shape()));
            }
        }
        axis_total += p.shape()[axis];
    }
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let outer: usize = first.shape()[..axis].iter().product();
    let mut data = vec![0.0; outer * axis_total * inner];
    let dst_block = axis_total * inner;
    for o in 0..outer {
        let mut at = 0;
        for p in parts {
            let ext = p.shape()[axis];
            let src = &p.data()[o * ext * inner..(o + 1) * ext * inner];
            data[o * dst_block + at..o * dst_block + at + ext * inner].copy_from_slice(src);
            at += ext * inner;
        }
    }
    let mut out_shape = first.shape().to_vec();
    out_shape[axis] = axis_total;
    Ok(Tensor::from_op(
        out_shape,
        data,
        Op::Concat(parts.to_vec(), axis),
    ))
}
