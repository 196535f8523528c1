//! Central finite-difference gradient verification.

use super::{backward, ParamSet, Tensor};
use crate::error::Result;
use crate::Real;

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: Real,
    /// (parameter-or-input label, flat element index) of the worst element.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: Real) -> bool {
        self.max_rel_err < tol
    }
}

/// Relative error with an absolute floor, so near-zero gradients are
/// compared at ~1e-6 absolute rather than amplifying FD noise.
pub fn relative_error(analytic: Real, fd: Real) -> Real {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-3)
}

/// Check `f`'s gradient w.r.t. each differentiable input by central
/// differences with step `h`. `f` must reduce to a scalar.
pub fn finite_diff_check(
    f: impl Fn(&[Tensor]) -> Result<Tensor>,
    inputs: &[Tensor],
    h: Real,
) -> Result<GradCheckReport> {
    let loss = f(inputs)?;
    for t in inputs {
        t.zero_grad();
    }
    backward(&loss)?;
    let analytic: Vec<Vec<Real>> = inputs
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    for (ti, t) in inputs.iter().enumerate() {
        if !t.requires_grad() {
            continue;
        }
        for e in 0..t.numel() {
            let eval = |delta: Real| -> Result<Real> {
                let mut data = t.data().to_vec();
                data[e] += delta;
                let mut probe: Vec<Tensor> = inputs.to_vec();
                probe[ti] = Tensor::leaf(t.shape(), data)?;
                Ok(f(&probe)?.item())
            };
            let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
            let rel = relative_error(analytic[ti][e], fd);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((format!("input{ti}"), e));
            }
        }
    }
    Ok(report)
}

/// Check the gradient of a model loss w.r.t. every trainable parameter.
/// `loss_fn` must recompute the loss from the registry's current values.
pub fn param_grad_check(
    params: &ParamSet,
    loss_fn: impl Fn() -> Result<Tensor>,
    h: Real,
) -> Result<GradCheckReport> {
    params.zero_grad_all();
    let loss = loss_fn()?;
    backward(&loss)?;
    let analytic: Vec<Vec<Real>> = params.iter().map(|p| p.grad_or_zero()).collect();

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    for (pi, p) in params.iter().enumerate() {
        if !p.trainable() {
            continue;
        }
        let original = p.data();
        for e in 0..p.numel() {
            let mut eval = |delta: Real| -> Result<Real> {
                let mut data = original.clone();
                data[e] += delta;
                p.set_data(data)?;
                Ok(loss_fn()?.item())
            };
            let plus = eval(h)?;
            let minus = eval(-h)?;
            p.set_data(original.clone())?;
            let fd = (plus - minus) / (2.0 * h);
            let rel = relative_error(analytic[pi][e], fd);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((p.name().to_string(), e));
            }
        }
    }
    Ok(report)
}
