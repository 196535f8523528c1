//! Reverse-mode backward pass over the recorded op graph.

use std::collections::{HashMap, HashSet};

use super::kernels;
use super::{Op, Tensor};
use crate::error::{Error, Result};
use crate::Real;

/// Propagate `d(loss)/d(node)` from a scalar loss to every differentiable
/// leaf reachable through the graph, accumulating into each leaf's grad.
pub fn backward(loss: &Tensor) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::NonScalarLoss {
            shape: loss.shape().to_vec(),
        });
    }
    if !loss.requires_grad() {
        return Ok(());
    }

    // Post-order DFS; reversing it yields consumers before producers.
    let mut topo: Vec<Tensor> = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(loss.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            topo.push(t);
            continue;
        }
        if !visited.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        for p in t.inner.op.parents() {
            if p.requires_grad() && !visited.contains(&p.id()) {
                stack.push(((*p).clone(), false));
            }
        }
    }

    let mut grads: HashMap<u64, Vec<Real>> = HashMap::new();
    grads.insert(loss.id(), vec![1.0]);

    for t in topo.iter().rev() {
        let g = match grads.remove(&t.id()) {
            Some(g) => g,
            None => continue,
        };
        if matches!(t.inner.op, Op::Leaf) {
            t.accumulate_grad(&g);
            continue;
        }
        propagate(t, &g, &mut grads);
    }
    Ok(())
}

fn add_into(grads: &mut HashMap<u64, Vec<Real>>, target: &Tensor, contrib: Vec<Real>) {
    if !target.requires_grad() {
        return;
    }
    match grads.get_mut(&target.id()) {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(contrib) {
                *a += v;
            }
        }
        None => {
            grads.insert(target.id(), contrib);
        }
    }
}

fn propagate(out: &Tensor, g: &[Real], grads: &mut HashMap<u64, Vec<Real>>) {
    let out_shape = out.shape();
    match &out.inner.op {
        Op::Leaf => unreachable!("leaves handled by caller"),
        Op::Add(a, b) => {
            let ga = kernels::broadcast_reduce(g, b.data(), b.shape(), a.shape(), out_shape, |g, _| g);
            let gb = kernels::broadcast_reduce(g, a.data(), a.shape(), b.shape(), out_shape, |g, _| g);
            add_into(grads, a, ga);
            add_into(grads, b, gb);
        }
        Op::Sub(a, b) => {
            let ga = kernels::broadcast_reduce(g, b.data(), b.shape(), a.shape(), out_shape, |g, _| g);
            let gb = kernels::broadcast_reduce(g, a.data(), a.shape(), b.shape(), out_shape, |g, _| -g);
            add_into(grads, a, ga);
            add_into(grads, b, gb);
        }
        Op::Mul(a, b) => {
            let ga =
                kernels::broadcast_reduce(g, b.data(), b.shape(), a.shape(), out_shape, |g, v| g * v);
            let gb =
                kernels::broadcast_reduce(g, a.data(), a.shape(), b.shape(), out_shape, |g, v| g * v);
            add_into(grads, a, ga);
            add_into(grads, b, gb);
        }
        Op::Matmul(a, b) => {
            let (as_, bs) = (a.shape(), b.shape());
            let (m, k) = (as_[as_.len() - 2], as_[as_.len() - 1]);
            let n = bs[bs.len() - 1];
            let batch: usize = as_[..as_.len() - 2].iter().product();
            let b_batched = bs.len() > 2;
            // dA = g @ B^T
            let bt = kernels::transpose_last2(b.data(), if b_batched { batch } else { 1 }, k, n);
            let ga = kernels::matmul(g, &bt, batch, m, n, k, b_batched);
            add_into(grads, a, ga);
            // dB = A^T @ g, summed over the batch when B is shared.
            if b_batched {
                let at = kernels::transpose_last2(a.data(), batch, m, k);
                let gb = kernels::matmul(&at, g, batch, k, m, n, true);
                add_into(grads, b, gb);
            } else {
                let at = kernels::transpose_last2(a.data(), 1, batch * m, k);
                let gb = kernels::matmul(&at, g, 1, k, batch * m, n, true);
                add_into(grads, b, gb);
            }
        }
        Op::Scale(a, c) => {
            add_into(grads, a, g.iter().map(|&v| v * c).collect());
        }
        Op::AddScalar(a, _) => {
            add_into(grads, a, g.to_vec());
        }
        Op::Concat(parts, axis) => {
            let axis = *axis;
            let inner: usize = out_shape[axis + 1..].iter().product();
            let outer: usize = out_shape[..axis].iter().product();
            let total = out_shape[axis];
            let mut at = 0;
            for p in parts {
                let ext = p.shape()[axis];
                let mut gp = vec![0.0; p.numel()];
                for o in 0..outer {
                    let src = &g[o * total * inner + at..o * total * inner + at + ext * inner];
                    gp[o * ext * inner..(o + 1) * ext * inner].copy_from_slice(src);
                }
                at += ext * inner;
                add_into(grads, p, gp);
            }
        }
        Op::Slice {
            input,
            axis,
            start,
            len,
        } => {
            let shape = input.shape();
            let inner: usize = shape[axis + 1..].iter().product();
            let outer: usize = shape[..*axis].iter().product();
            let ext = shape[*axis];
            let mut gi = vec![0.0; input.numel()];
            for o in 0..outer {
                let dst = &mut gi[o * ext * inner + start * inner..o * ext * inner + (start + len) * inner];
                dst.copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            add_into(grads, input, gi);
        }
        Op::MeanAxis { input, axis } => {
            let shape = input.shape();
            let inner: usize = shape[axis + 1..].iter().product();
            let outer: usize = shape[..*axis].iter().product();
            let ext = shape[*axis];
            let inv = 1.0 / ext as Real;
            let mut gi = vec![0.0; input.numel()];
            for o in 0..outer {
                for a in 0..ext {
                    let dst = &mut gi[(o * ext + a) * inner..(o * ext + a + 1) * inner];
                    let src = &g[o * inner..(o + 1) * inner];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = s * inv;
                    }
                }
            }
            add_into(grads, input, gi);
        }
        Op::MeanAll(input) => {
            let v = g[0] / input.numel() as Real;
            add_into(grads, input, vec![v; input.numel()]);
        }
        Op::SumAll(input) => {
            add_into(grads, input, vec![g[0]; input.numel()]);
        }
        Op::Sigmoid(input) => {
            let gi = out
                .data()
                .iter()
                .zip(g)
                .map(|(&y, &gv)| gv * y * (1.0 - y))
                .collect();
            add_into(grads, input, gi);
        }
        Op::Gelu(input) => {
            let gi = input
                .data()
                .iter()
                .zip(g)
                .map(|(&x, &gv)| gv * kernels::gelu_grad(x))
                .collect();
            add_into(grads, input, gi);
        }
        Op::SoftmaxLast(input) => {
            let last = *out_shape.last().unwrap();
            let mut gi = vec![0.0; input.numel()];
            for ((y_row, g_row), gi_row) in out
                .data()
                .chunks(last)
                .zip(g.chunks(last))
                .zip(gi.chunks_mut(last))
            {
                let dot: Real = y_row.iter().zip(g_row).map(|(&y, &gv)| y * gv).sum();
                for ((d, &y), &gv) in gi_row.iter_mut().zip(y_row).zip(g_row) {
                    *d = y * (gv - dot);
                }
            }
            add_into(grads, input, gi);
        }
        Op::LayerNormLast { input, eps } => {
            let last = *out_shape.last().unwrap();
            let inv_n = 1.0 / last as Real;
            let mut gi = vec![0.0; input.numel()];
            for ((x_row, g_row), gi_row) in input
                .data()
                .chunks(last)
                .zip(g.chunks(last))
                .zip(gi.chunks_mut(last))
            {
                let mean = x_row.iter().sum::<Real>() * inv_n;
                let var = x_row.iter().map(|&x| (x - mean) * (x - mean)).sum::<Real>() * inv_n;
                let inv_std = 1.0 / (var + eps).sqrt();
                let g_mean = g_row.iter().sum::<Real>() * inv_n;
                let gx_mean = g_row
                    .iter()
                    .zip(x_row)
                    .map(|(&gv, &x)| gv * (x - mean) * inv_std)
                    .sum::<Real>()
                    * inv_n;
                for ((d, &x), &gv) in gi_row.iter_mut().zip(x_row).zip(g_row) {
                    let xh = (x - mean) * inv_std;
                    *d = inv_std * (gv - g_mean - xh * gx_mean);
                }
            }
            add_into(grads, input, gi);
        }
        Op::Reshape(input) => {
            add_into(grads, input, g.to_vec());
        }
        Op::Permute { input, axes } => {
            // Gradient flows back through the inverse permutation.
            let mut inverse = vec![0usize; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inverse[a] = i;
            }
            let gi = kernels::permute(g, out_shape, &inverse);
            add_into(grads, input, gi);
        }
    }
}
