//! Raw array kernels behind the tensor ops.
//!
//! All loops here are deterministic: parallel sections split work by output
//! row only, so results are bit-identical regardless of thread count.

use rayon::prelude::*;

use crate::Real;

/// Work threshold (multiply-adds) below which matmul stays single-threaded.
const PAR_THRESHOLD: usize = 1 << 15;

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Right-aligned broadcast shape of two operand shapes, if compatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db {
            out[i] = da;
        } else if da == 1 {
            out[i] = db;
        } else if db == 1 {
            out[i] = da;
        } else {
            return None;
        }
    }
    Some(out)
}

/// Per-axis element strides of `shape` right-aligned into `out_shape`,
/// with stride 0 on broadcast axes.
fn aligned_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - shape.len();
    let mut contiguous = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        contiguous[i] = acc;
        acc *= shape[i];
    }
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        if i >= offset && shape[i - offset] != 1 {
            out[i] = contiguous[i - offset];
        }
    }
    out
}

/// Whether `b_shape` is an exact suffix of `a_shape` (fast chunked path).
fn is_suffix(a_shape: &[usize], b_shape: &[usize]) -> bool {
    b_shape.len() <= a_shape.len() && a_shape[a_shape.len() - b_shape.len()..] == *b_shape
}

/// Elementwise binary op with right-aligned broadcasting.
pub fn broadcast_binop(
    a: &[Real],
    a_shape: &[usize],
    b: &[Real],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(Real, Real) -> Real,
) -> Vec<Real> {
    let n = numel(out_shape);
    let mut out = vec![0.0; n];
    if a_shape == out_shape && b_shape == out_shape {
        for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
            *o = f(x, y);
        }
        return out;
    }
    if a_shape == out_shape && is_suffix(a_shape, b_shape) {
        let bn = b.len().max(1);
        for (chunk, ochunk) in a.chunks(bn).zip(out.chunks_mut(bn)) {
            for ((o, &x), &y) in ochunk.iter_mut().zip(chunk).zip(b) {
                *o = f(x, y);
            }
        }
        return out;
    }
    // General odometer walk.
    let sa = aligned_strides(a_shape, out_shape);
    let sb = aligned_strides(b_shape, out_shape);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in out.iter_mut() {
        *o = f(a[oa], b[ob]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
        }
    }
    out
}

/// Reduce a gradient of `out_shape` down to `shape` by summing over
/// broadcast axes. `term` maps (grad, other-operand-value) to the local
/// contribution, so the same walk serves add, sub, and mul backward.
pub fn broadcast_reduce(
    grad: &[Real],
    other: &[Real],
    other_shape: &[usize],
    target_shape: &[usize],
    out_shape: &[usize],
    term: impl Fn(Real, Real) -> Real,
) -> Vec<Real> {
    let mut acc = vec![0.0; numel(target_shape)];
    if target_shape == out_shape && other_shape == out_shape {
        for ((a, &g), &v) in acc.iter_mut().zip(grad).zip(other) {
            *a += term(g, v);
        }
        return acc;
    }
    let st = aligned_strides(target_shape, out_shape);
    let so = aligned_strides(other_shape, out_shape);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let (mut ot, mut oo) = (0usize, 0usize);
    for &g in grad.iter() {
        acc[ot] += term(g, other[oo]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ot += st[d];
            oo += so[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            ot -= st[d] * out_shape[d];
            oo -= so[d] * out_shape[d];
        }
    }
    acc
}

/// Batched matrix multiply: `a` is batch x m x k, `b` is batch x k x n
/// (or k x n shared across the batch when `b_batched` is false).
pub fn matmul(
    a: &[Real],
    b: &[Real],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_batched: bool,
) -> Vec<Real> {
    let mut out = vec![0.0; batch * m * n];
    let row = |bi: usize, i: usize, o: &mut [Real]| {
        let a_row = &a[(bi * m + i) * k..(bi * m + i) * k + k];
        let b_base = if b_batched { bi * k * n } else { 0 };
        for (kk, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[b_base + kk * n..b_base + kk * n + n];
            for (ov, &bv) in o.iter_mut().zip(b_row) {
                *ov += av * bv;
            }
        }
    };
    if batch * m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(|(r, o)| {
            row(r / m, r % m, o);
        });
    } else {
        for (r, o) in out.chunks_mut(n).enumerate() {
            row(r / m, r % m, o);
        }
    }
    out
}

/// Transpose the last two axes of a batch x r x c array.
pub fn transpose_last2(a: &[Real], batch: usize, r: usize, c: usize) -> Vec<Real> {
    let mut out = vec![0.0; batch * r * c];
    for bi in 0..batch {
        let src = &a[bi * r * c..(bi + 1) * r * c];
        let dst = &mut out[bi * r * c..(bi + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}

/// Permute axes of an arbitrary-rank array.
pub fn permute(a: &[Real], shape: &[usize], axes: &[usize]) -> Vec<Real> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&ax| in_strides[ax]).collect();
    let n = numel(shape);
    let mut out = vec![0.0; n];
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for o in out.iter_mut() {
        *o = a[src];
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            src -= src_strides[d] * out_shape[d];
        }
    }
    out
}

/// Softmax along the last axis, max-subtracted for stability.
pub fn softmax_last(a: &[Real], last: usize) -> Vec<Real> {
    let mut out = vec![0.0; a.len()];
    for (src, dst) in a.chunks(last).zip(out.chunks_mut(last)) {
        let max = src.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
        let mut sum = 0.0;
        for (d, &x) in dst.iter_mut().zip(src) {
            let e = (x - max).exp();
            *d = e;
            sum += e;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    out
}

/// Normalize the last axis to zero mean and unit variance (population
/// variance, epsilon inside the square root). No affine part.
pub fn layer_norm_last(a: &[Real], last: usize, eps: Real) -> Vec<Real> {
    let mut out = vec![0.0; a.len()];
    for (src, dst) in a.chunks(last).zip(out.chunks_mut(last)) {
        let mean = src.iter().sum::<Real>() / last as Real;
        let var = src.iter().map(|&x| (x - mean) * (x - mean)).sum::<Real>() / last as Real;
        let inv = 1.0 / (var + eps).sqrt();
        for (d, &x) in dst.iter_mut().zip(src) {
            *d = (x - mean) * inv;
        }
    }
    out
}

pub fn sigmoid(x: Real) -> Real {
    1.0 / (1.0 + (-x).exp())
}

const GELU_C: Real = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: Real = 0.044_715;

/// Tanh-form smooth gating activation.
pub fn gelu(x: Real) -> Real {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

/// Analytic derivative of `gelu`.
pub fn gelu_grad(x: Real) -> Real {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 3], &[2, 3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[1], &[5, 2]), Some(vec![5, 2]));
        assert_eq!(broadcast_shape(&[2, 3], &[4]), None);
    }

    #[test]
    fn matmul_small() {
        // [[1,2],[3,4]] @ [[5,6],[7,8]] = [[19,22],[43,50]]
        let c = matmul(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], 1, 2, 2, 2, false);
        assert_eq!(c, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transpose_roundtrip() {
        let a: Vec<Real> = (0..24).map(|v| v as Real).collect();
        let t = transpose_last2(&a, 2, 3, 4);
        let back = transpose_last2(&t, 2, 4, 3);
        assert_eq!(a, back);
    }

    #[test]
    fn permute_matches_transpose() {
        let a: Vec<Real> = (0..24).map(|v| v as Real).collect();
        let p = permute(&a, &[2, 3, 4], &[0, 2, 1]);
        let t = transpose_last2(&a, 2, 3, 4);
        assert_eq!(p, t);
    }
}
