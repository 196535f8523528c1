//! Building blocks shared by the feature extractor and the decoder stack.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{ParamSet, Parameter, Tensor};
use crate::Real;

pub const LAYER_NORM_EPS: Real = 1e-5;

/// Symmetric uniform fan-in init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn uniform_init(n: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Vec<Real> {
    let bound = 1.0 / (fan_in.max(1) as Real).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// Affine map `x @ w + b` applied to the last axis.
pub struct Linear {
    pub w: Rc<Parameter>,
    pub b: Rc<Parameter>,
    fan_in: usize,
    fan_out: usize,
}

impl Linear {
    pub fn new(
        params: &mut ParamSet,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Linear> {
        let w = params.register(
            &format!("{prefix}.weight"),
            &[fan_in, fan_out],
            uniform_init(fan_in * fan_out, fan_in, rng),
            true,
        )?;
        let b = params.register(
            &format!("{prefix}.bias"),
            &[fan_out],
            uniform_init(fan_out, fan_in, rng),
            true,
        )?;
        Ok(Linear {
            w,
            b,
            fan_in,
            fan_out,
        })
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.w.value())?.add(&self.b.value())
    }

    pub fn fan_in(&self) -> usize {
        self.fan_in
    }

    pub fn fan_out(&self) -> usize {
        self.fan_out
    }
}

/// Last-axis layer normalization with learnable scale and shift.
pub struct LayerNormAffine {
    pub gamma: Rc<Parameter>,
    pub beta: Rc<Parameter>,
}

impl LayerNormAffine {
    pub fn new(params: &mut ParamSet, prefix: &str, width: usize) -> Result<LayerNormAffine> {
        let gamma = params.register(&format!("{prefix}.gamma"), &[width], vec![1.0; width], true)?;
        let beta = params.register(&format!("{prefix}.beta"), &[width], vec![0.0; width], true)?;
        Ok(LayerNormAffine { gamma, beta })
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm_last(LAYER_NORM_EPS)?
            .mul(&self.gamma.value())?
            .add(&self.beta.value())
    }
}
