//! ARMA-style patch feature extraction.
//!
//! For each patch position t the AR branch aggregates the p preceding
//! patches scaled by learnable scalars phi_i, and the MA branch aggregates
//! the q preceding innovation proxies (first-order differences between
//! consecutive patches) scaled by theta_j. Each branch is projected to
//! half the model width; the halves are concatenated and fused by a final
//! affine layer. Patch indices before the window start contribute zero
//! vectors, which keeps shapes uniform and the extractor causal.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::layers::Linear;
use crate::tensor::{concat, ParamSet, Parameter, Tensor};
use crate::Real;

pub struct Vfe {
    ar_order: usize,
    ma_order: usize,
    patch_len: usize,
    half: usize,
    phi: Vec<Rc<Parameter>>,
    theta: Vec<Rc<Parameter>>,
    proj_ar: Option<Linear>,
    proj_ma: Option<Linear>,
    fuse: Linear,
}

impl Vfe {
    /// Register parameters for orders (p, q). An order of zero disables
    /// that branch: its half is zero-filled and it owns no parameters.
    /// `d_model` must be even (validated by the model config).
    pub fn new(
        params: &mut ParamSet,
        ar_order: usize,
        ma_order: usize,
        patch_len: usize,
        d_model: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vfe> {
        if d_model % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model must be even to split AR/MA halves, got {d_model}"
            )));
        }
        let half = d_model / 2;
        let mut phi = Vec::with_capacity(ar_order);
        for i in 1..=ar_order {
            // Uniform-averaging prior over lags.
            phi.push(params.register(
                &format!("vfe.phi.{i}"),
                &[1],
                vec![1.0 / ar_order as Real],
                true,
            )?);
        }
        let mut theta = Vec::with_capacity(ma_order);
        for j in 1..=ma_order {
            theta.push(params.register(
                &format!("vfe.theta.{j}"),
                &[1],
                vec![1.0 / ma_order as Real],
                true,
            )?);
        }
        let proj_ar = if ar_order > 0 {
            Some(Linear::new(params, "vfe.proj_ar", ar_order * patch_len, half, rng)?)
        } else {
            None
        };
        let proj_ma = if ma_order > 0 {
            Some(Linear::new(params, "vfe.proj_ma", ma_order * patch_len, half, rng)?)
        } else {
            None
        };
        let fuse = Linear::new(params, "vfe.fuse", d_model, d_model, rng)?;
        Ok(Vfe {
            ar_order,
            ma_order,
            patch_len,
            half,
            phi,
            theta,
            proj_ar,
            proj_ma,
            fuse,
        })
    }

    pub fn ar_order(&self) -> usize {
        self.ar_order
    }

    pub fn ma_order(&self) -> usize {
        self.ma_order
    }

    /// Shift patch rows forward by `lag` along the patch axis, filling the
    /// first `lag` positions with zeros: row t of the result is row t-lag.
    fn lagged(x: &Tensor, lag: usize) -> Result<Tensor> {
        let (r, n, p) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if lag >= n {
            return Ok(Tensor::zeros(&[r, n, p]));
        }
        let head = Tensor::zeros(&[r, lag, p]);
        let body = x.slice(1, 0, n - lag)?;
        concat(&[head, body], 1)
    }

    /// Innovation proxies: eps[t] = x[t] - x[t-1], zero at the first patch.
    fn innovations(patches: &Tensor) -> Result<Tensor> {
        let (r, n, p) = (
            patches.shape()[0],
            patches.shape()[1],
            patches.shape()[2],
        );
        if n == 1 {
            return Ok(Tensor::zeros(&[r, 1, p]));
        }
        let diff = patches.slice(1, 1, n - 1)?.sub(&patches.slice(1, 0, n - 1)?)?;
        concat(&[Tensor::zeros(&[r, 1, p]), diff], 1)
    }

    fn branch(
        patches: &Tensor,
        source: &Tensor,
        weights: &[Rc<Parameter>],
        proj: &Option<Linear>,
        half: usize,
    ) -> Result<Tensor> {
        let (r, n) = (patches.shape()[0], patches.shape()[1]);
        let proj = match proj {
            Some(p) => p,
            None => return Ok(Tensor::zeros(&[r, n, half])),
        };
        let mut parts = Vec::with_capacity(weights.len());
        for (i, w) in weights.iter().enumerate() {
            let lag = Self::lagged(source, i + 1)?;
            parts.push(lag.mul(&w.value())?);
        }
        proj.apply(&concat(&parts, 2)?)
    }

    /// AR half: Proj_AR(Concat(phi_1 * x[t-1], ..., phi_p * x[t-p])).
    pub fn ar_features(&self, patches: &Tensor) -> Result<Tensor> {
        Self::branch(patches, patches, &self.phi, &self.proj_ar, self.half)
    }

    /// MA half: Proj_MA(Concat(theta_1 * eps[t-1], ..., theta_q * eps[t-q])).
    pub fn ma_features(&self, patches: &Tensor) -> Result<Tensor> {
        let eps = Self::innovations(patches)?;
        Self::branch(patches, &eps, &self.theta, &self.proj_ma, self.half)
    }

    /// Concatenate the halves and apply the fusion affine map.
    pub fn fuse(&self, z_ar: &Tensor, z_ma: &Tensor) -> Result<Tensor> {
        if z_ar.shape()[..2] != z_ma.shape()[..2] {
            return Err(Error::ShapeMismatch {
                op: "vfe.fuse",
                lhs: z_ar.shape().to_vec(),
                rhs: z_ma.shape().to_vec(),
            });
        }
        self.fuse.apply(&concat(&[z_ar.clone(), z_ma.clone()], 2)?)
    }

    /// Full extractor: patches (rows x N x P) -> enhancement (rows x N x D).
    pub fn features(&self, patches: &Tensor) -> Result<Tensor> {
        if patches.rank() != 3 || patches.shape()[2] != self.patch_len {
            return Err(Error::ShapeMismatch {
                op: "vfe.features",
                lhs: patches.shape().to_vec(),
                rhs: vec![0, 0, self.patch_len],
            });
        }
        let ar = self.ar_features(patches)?;
        let ma = self.ma_features(patches)?;
        self.fuse(&ar, &ma)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    fn random_patches(r: usize, n: usize, p: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<Real> = (0..r * n * p).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Tensor::new(&[r, n, p], data).unwrap()
    }

    fn identity_projection(lin: &Linear) {
        let (fi, fo) = (lin.fan_in(), lin.fan_out());
        let mut w = vec![0.0; fi * fo];
        for i in 0..fi.min(fo) {
            w[i * fo + i] = 1.0;
        }
        lin.w.set_data(w).unwrap();
        lin.b.set_data(vec![0.0; fo]).unwrap();
    }

    /// Scalar reference for the full extractor, nested loops only.
    #[allow(clippy::needless_range_loop)]
    fn loop_reference(
        patches: &[Real],
        r: usize,
        n: usize,
        pl: usize,
        p: usize,
        q: usize,
        d: usize,
        get: impl Fn(&str) -> Vec<Real>,
    ) -> Vec<Real> {
        let half = d / 2;
        let at = |row: usize, t: isize, k: usize| -> Real {
            if t < 0 {
                0.0
            } else {
                patches[row * n * pl + t as usize * pl + k]
            }
        };
        let eps = |row: usize, t: isize, k: usize| -> Real {
            if t < 1 {
                0.0
            } else {
                at(row, t, k) - at(row, t - 1, k)
            }
        };
        let mut out = vec![0.0; r * n * d];
        let (aw, ab) = (get("vfe.proj_ar.weight"), get("vfe.proj_ar.bias"));
        let (mw, mb) = (get("vfe.proj_ma.weight"), get("vfe.proj_ma.bias"));
        let (fw, fb) = (get("vfe.fuse.weight"), get("vfe.fuse.bias"));
        for row in 0..r {
            for t in 0..n {
                let mut combined = vec![0.0; d];
                if p > 0 {
                    let mut cat = vec![0.0; p * pl];
                    for i in 1..=p {
                        let phi = get(&format!("vfe.phi.{i}"))[0];
                        for k in 0..pl {
                            cat[(i - 1) * pl + k] = phi * at(row, t as isize - i as isize, k);
                        }
                    }
                    for o in 0..half {
                        let mut acc = ab[o];
                        for (ii, &cv) in cat.iter().enumerate() {
                            acc += cv * aw[ii * half + o];
                        }
                        combined[o] = acc;
                    }
                }
                if q > 0 {
                    let mut cat = vec![0.0; q * pl];
                    for j in 1..=q {
                        let theta = get(&format!("vfe.theta.{j}"))[0];
                        for k in 0..pl {
                            cat[(j - 1) * pl + k] = theta * eps(row, t as isize - j as isize, k);
                        }
                    }
                    for o in 0..half {
                        let mut acc = mb[o];
                        for (ii, &cv) in cat.iter().enumerate() {
                            acc += cv * mw[ii * half + o];
                        }
                        combined[half + o] = acc;
                    }
                }
                for o in 0..d {
                    let mut acc = fb[o];
                    for (ii, &cv) in combined.iter().enumerate() {
                        acc += cv * fw[ii * d + o];
                    }
                    out[row * n * d + t * d + o] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn ar_identity_projection_shifts_patches() {
        let mut params = ParamSet::new();
        // P=3, D=6 so D/2 = P and the projection can be the identity.
        let vfe = Vfe::new(&mut params, 1, 0, 3, 6, &mut rng()).unwrap();
        vfe.phi[0].set_data(vec![1.0]).unwrap();
        identity_projection(vfe.proj_ar.as_ref().unwrap());
        let patches = Tensor::new(
            &[1, 3, 3],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        )
        .unwrap();
        let out = vfe.ar_features(&patches).unwrap();
        assert_eq!(out.shape(), &[1, 3, 3]);
        assert_eq!(&out.data()[0..3], &[0.0, 0.0, 0.0]); // t=1 has no lag
        assert_eq!(&out.data()[3..6], &[1.0, 2.0, 3.0]);
        assert_eq!(&out.data()[6..9], &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn ar_zero_patches_zero_output_with_zero_bias() {
        let mut params = ParamSet::new();
        let vfe = Vfe::new(&mut params, 2, 0, 4, 8, &mut rng()).unwrap();
        vfe.proj_ar
            .as_ref()
            .unwrap()
            .b
            .set_data(vec![0.0; 4])
            .unwrap();
        let patches = Tensor::zeros(&[2, 3, 4]);
        let out = vfe.ar_features(&patches).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ma_constant_patches_give_bias_only() {
        let mut params = ParamSet::new();
        let vfe = Vfe::new(&mut params, 0, 2, 3, 6, &mut rng()).unwrap();
        let patches = Tensor::new(&[1, 4, 3], vec![7.0; 12]).unwrap();
        let out = vfe.ma_features(&patches).unwrap();
        let bias = vfe.proj_ma.as_ref().unwrap().b.data();
        for t in 0..4 {
            assert_eq!(&out.data()[t * 3..(t + 1) * 3], &bias[..]);
        }
    }

    #[test]
    fn ma_identity_projection_on_ramp() {
        let mut params = ParamSet::new();
        let vfe = Vfe::new(&mut params, 0, 1, 3, 6, &mut rng()).unwrap();
        vfe.theta[0].set_data(vec![1.0]).unwrap();
        identity_projection(vfe.proj_ma.as_ref().unwrap());
        // Patches t (1-based) hold constant value t: eps[t] = 1 for t >= 2.
        let patches = Tensor::new(
            &[1, 4, 3],
            vec![1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 3.0, 3.0, 3.0, 4.0, 4.0, 4.0],
        )
        .unwrap();
        let out = vfe.ma_features(&patches).unwrap();
        // Output at t is eps[t-1] = x[t-1] - x[t-2].
        assert_eq!(&out.data()[0..3], &[0.0, 0.0, 0.0]); // t=1: lag out of range
        assert_eq!(&out.data()[3..6], &[0.0, 0.0, 0.0]); // t=2: eps[1] = 0
        assert_eq!(&out.data()[6..9], &[1.0, 1.0, 1.0]); // t=3: eps[2] = 1
        assert_eq!(&out.data()[9..12], &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn fuse_identity_returns_concatenation() {
        let mut params = ParamSet::new();
        let vfe = Vfe::new(&mut params, 1, 1, 2, 4, &mut rng()).unwrap();
        identity_projection(&vfe.fuse);
        let a = random_patches(2, 3, 2, 1);
        let b = random_patches(2, 3, 2, 2);
        let out = vfe.fuse(&a, &b).unwrap();
        for row in 0..2 {
            for t in 0..3 {
                let o = &out.data()[(row * 3 + t) * 4..(row * 3 + t + 1) * 4];
                let ea = &a.data()[(row * 3 + t) * 2..(row * 3 + t + 1) * 2];
                let eb = &b.data()[(row * 3 + t) * 2..(row * 3 + t + 1) * 2];
                assert_eq!(&o[..2], ea);
                assert_eq!(&o[2..], eb);
            }
        }
    }

    #[test]
    fn fuse_zero_halves_give_bias_broadcast() {
        let mut params = ParamSet::new();
        let vfe = Vfe::new(&mut params, 1, 1, 2, 4, &mut rng()).unwrap();
        let z = Tensor::zeros(&[2, 3, 2]);
        let out = vfe.fuse(&z, &z).unwrap();
        let bias = vfe.fuse.b.data();
        for chunk in out.data().chunks(4) {
            assert_eq!(chunk, &bias[..]);
        }
    }

    #[test]
    fn full_extractor_matches_scalar_loops() {
        for (p, q, seed) in [(2, 2, 10u64), (1, 2, 11), (2, 1, 12), (0, 2, 13), (2, 0, 14)] {
            let mut params = ParamSet::new();
            let vfe = Vfe::new(&mut params, p, q, 3, 8, &mut rng()).unwrap();
            let patches = random_patches(2, 5, 3, seed);
            let out = vfe.features(&patches).unwrap();
            let reference = loop_reference(patches.data(), 2, 5, 3, p, q, 8, |name| {
                params.get(name).map(|p| p.data()).unwrap_or_default()
            });
            assert_eq!(out.shape(), &[2, 5, 8]);
            for (a, b) in out.data().iter().zip(&reference) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn causality_future_patch_perturbation_leaves_past_unchanged() {
        let mut params = ParamSet::new();
        let vfe = Vfe::new(&mut params, 2, 2, 3, 8, &mut rng()).unwrap();
        let base = random_patches(1, 6, 3, 20);
        let out_base = vfe.features(&base).unwrap();
        for t_perturb in 2..6 {
            let mut data = base.data().to_vec();
            for k in 0..3 {
                data[t_perturb * 3 + k] += 5.0;
            }
            let out = vfe
                .features(&Tensor::new(&[1, 6, 3], data).unwrap())
                .unwrap();
            // Every feature at index <= t_perturb is bit-identical.
            for t in 0..=t_perturb {
                assert_eq!(
                    &out.data()[t * 8..(t + 1) * 8],
                    &out_base.data()[t * 8..(t + 1) * 8],
                    "feature at {t} changed by perturbing patch {t_perturb}"
                );
            }
        }
    }

    #[test]
    fn linearity_with_zero_biases() {
        let mut params = ParamSet::new();
        let vfe = Vfe::new(&mut params, 2, 1, 3, 8, &mut rng()).unwrap();
        for lin in [
            vfe.proj_ar.as_ref().unwrap(),
            vfe.proj_ma.as_ref().unwrap(),
            &vfe.fuse,
        ] {
            lin.b.set_data(vec![0.0; lin.fan_out()]).unwrap();
        }
        let x = random_patches(1, 4, 3, 30);
        let y = random_patches(1, 4, 3, 31);
        let (a, b) = (0.7, -1.3);
        let mixed: Vec<Real> = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&xv, &yv)| a * xv + b * yv)
            .collect();
        let out_mixed = vfe
            .features(&Tensor::new(&[1, 4, 3], mixed).unwrap())
            .unwrap();
        let out_x = vfe.features(&x).unwrap();
        let out_y = vfe.features(&y).unwrap();
        for i in 0..out_mixed.numel() {
            let expect = a * out_x.data()[i] + b * out_y.data()[i];
            assert!((out_mixed.data()[i] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn disabled_branch_absent_from_registry() {
        let mut params = ParamSet::new();
        let vfe = Vfe::new(&mut params, 2, 0, 3, 8, &mut rng()).unwrap();
        assert!(params.contains("vfe.phi.1"));
        assert!(params.contains("vfe.phi.2"));
        assert!(params.contains("vfe.proj_ar.weight"));
        assert!(!params.contains("vfe.theta.1"));
        assert!(!params.contains("vfe.proj_ma.weight"));
        // The disabled half is a zero tensor.
        let out = vfe.ma_features(&random_patches(1, 4, 3, 7)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[cfg(not(feature = "single-precision"))]
    #[test]
    fn gradients_pass_finite_difference_check() {
        use crate::tensor::param_grad_check;
        let mut params = ParamSet::new();
        let vfe = Vfe::new(&mut params, 2, 2, 2, 4, &mut rng()).unwrap();
        let patches = random_patches(2, 3, 2, 40);
        let report = param_grad_check(
            &params,
            || vfe.features(&patches)?.mul(&vfe.features(&patches)?)?.mean_all(),
            1e-5,
        )
        .unwrap();
        assert!(report.passes(1e-3), "max rel err {}", report.max_rel_err);
    }
}
