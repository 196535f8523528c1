//! The forecaster: patch embedding with additive feature fusion, a stack
//! of cross-attention decoder layers whose learnable queries are modulated
//! by a temporal gate, and a per-query projection back to future patches.

pub mod checkpoint;
pub mod layers;

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use layers::{Linear, LayerNormAffine};

use crate::data::{denormalize, patchify, SeriesWindow};
use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Parameter, Tensor};
use crate::vfe::Vfe;
use crate::Real;

/// Every architectural hyper-parameter. Training settings live in
/// [`crate::train::TrainConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub patch_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_width: usize,
    /// AR order p; zero disables the branch.
    pub ar_order: usize,
    /// MA order q; zero disables the branch.
    pub ma_order: usize,
    /// Fusion scale for the extracted features, in [0, 1].
    pub alpha: Real,
    /// Gate blend weight, in [0, 1].
    pub beta: Real,
    /// Training-time probability of zeroing a query's attention output.
    pub mask_rate: Real,
    /// Enables the temporal gate on the queries.
    pub ve_atten: bool,
    /// Treat alpha as a trainable scalar instead of a fixed constant.
    pub alpha_trainable: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            lookback: 96,
            horizon: 96,
            patch_len: 24,
            d_model: 128,
            n_layers: 3,
            n_heads: 4,
            ffn_width: 256,
            ar_order: 2,
            ma_order: 2,
            alpha: 0.3,
            beta: 0.3,
            mask_rate: 0.25,
            ve_atten: true,
            alpha_trainable: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.lookback < 2 {
            return fail(format!("lookback must be >= 2, got {}", self.lookback));
        }
        if self.patch_len == 0 {
            return fail("patch_len must be >= 1".to_string());
        }
        if self.horizon == 0 || self.horizon % self.patch_len != 0 {
            return fail(format!(
                "horizon {} must be a positive multiple of patch_len {}",
                self.horizon, self.patch_len
            ));
        }
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return fail(format!("d_model must be a positive even number, got {}", self.d_model));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_layers == 0 {
            return fail("n_layers must be >= 1".to_string());
        }
        if self.ffn_width == 0 {
            return fail("ffn_width must be >= 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail(format!("alpha must be in [0, 1], got {}", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return fail(format!("beta must be in [0, 1], got {}", self.beta));
        }
        if !(0.0..1.0).contains(&self.mask_rate) {
            return fail(format!("mask_rate must be in [0, 1), got {}", self.mask_rate));
        }
        Ok(())
    }

    /// N: number of input patches (tail replication-padded).
    pub fn n_patches(&self) -> usize {
        self.lookback.div_ceil(self.patch_len)
    }

    /// M: number of learnable future-patch queries.
    pub fn n_queries(&self) -> usize {
        self.horizon / self.patch_len
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    fn vfe_enabled(&self) -> bool {
        self.ar_order > 0 || self.ma_order > 0
    }
}

struct GateNet {
    fc1: Linear,
    fc2: Linear,
}

impl GateNet {
    /// Gate vector from the mean-pooled key sequence:
    /// sigmoid(fc2(gelu(fc1(mean over patches of K)))), each component in (0,1).
    fn vector(&self, k: &Tensor) -> Result<Tensor> {
        let pooled = k.mean_axis(1)?;
        self.fc2.apply(&self.fc1.apply(&pooled)?.gelu()?)?.sigmoid()
    }
}

struct DecoderLayer {
    q_proj: Linear,
    k_proj: Linear,
    v_proj: Linear,
    o_proj: Linear,
    gate: Option<GateNet>,
    ffn1: Linear,
    ffn2: Linear,
    norm1: LayerNormAffine,
    norm2: LayerNormAffine,
    n_heads: usize,
    head_dim: usize,
}

/// Blend gated and raw queries: `q ⊙ (1 + beta * (g - 1))`, algebraically
/// `beta * (q ⊙ g) + (1 - beta) * q` but exact at beta = 0 and at g = 1.
pub fn gate_queries(q: &Tensor, g: &Tensor, beta: Real) -> Result<Tensor> {
    let g3 = g.reshape(&[g.shape()[0], 1, g.shape()[1]])?;
    let mult = g3.add_scalar(-1.0)?.scale(beta)?.add_scalar(1.0)?;
    q.mul(&mult)
}

impl DecoderLayer {
    fn new(
        params: &mut ParamSet,
        index: usize,
        cfg: &ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<DecoderLayer> {
        let d = cfg.d_model;
        let pre = format!("layers.{index}");
        let q_proj = Linear::new(params, &format!("{pre}.attn.query"), d, d, rng)?;
        let k_proj = Linear::new(params, &format!("{pre}.attn.key"), d, d, rng)?;
        let v_proj = Linear::new(params, &format!("{pre}.attn.value"), d, d, rng)?;
        let o_proj = Linear::new(params, &format!("{pre}.attn.out"), d, d, rng)?;
        let gate = if cfg.ve_atten {
            Some(GateNet {
                fc1: Linear::new(params, &format!("{pre}.gate.fc1"), d, d, rng)?,
                fc2: Linear::new(params, &format!("{pre}.gate.fc2"), d, d, rng)?,
            })
        } else {
            None
        };
        let ffn1 = Linear::new(params, &format!("{pre}.ffn.fc1"), d, cfg.ffn_width, rng)?;
        let ffn2 = Linear::new(params, &format!("{pre}.ffn.fc2"), cfg.ffn_width, d, rng)?;
        let norm1 = LayerNormAffine::new(params, &format!("{pre}.norm1"), d)?;
        let norm2 = LayerNormAffine::new(params, &format!("{pre}.norm2"), d)?;
        Ok(DecoderLayer {
            q_proj,
            k_proj,
            v_proj,
            o_proj,
            gate,
            ffn1,
            ffn2,
            norm1,
            norm2,
            n_heads: cfg.n_heads,
            head_dim: cfg.head_dim(),
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (r, s) = (x.shape()[0], x.shape()[1]);
        x.reshape(&[r, s, self.n_heads, self.head_dim])?
            .permute(&[0, 2, 1, 3])
    }

    fn merge_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (r, s) = (x.shape()[0], x.shape()[2]);
        x.permute(&[0, 2, 1, 3])?
            .reshape(&[r, s, self.n_heads * self.head_dim])
    }

    /// One decoder step. Returns the layer output and the attention
    /// weights (rows x heads x M x N) for inspection.
    fn forward(
        &self,
        q_in: &Tensor,
        k: &Tensor,
        v: &Tensor,
        beta: Real,
        mask: Option<&Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        let q_gated = match &self.gate {
            Some(gate) => gate_queries(q_in, &gate.vector(k)?, beta)?,
            None => q_in.clone(),
        };
        let qh = self.split_heads(&self.q_proj.apply(&q_gated)?)?;
        let kh = self.split_heads(&self.k_proj.apply(k)?)?;
        let vh = self.split_heads(&self.v_proj.apply(v)?)?;
        let scale = 1.0 / (self.head_dim as Real).sqrt();
        let scores = qh.matmul(&kh.transpose_last2()?)?.scale(scale)?;
        let attn = scores.softmax_last()?;
        let ctx = self.merge_heads(&attn.matmul(&vh)?)?;
        let mut read = self.o_proj.apply(&ctx)?;
        if let Some(mask) = mask {
            // Query-adaptive masking: drop this query's attention read
            // before the residual, training only, no rescaling.
            read = read.mul(mask)?;
        }
        let x = self.norm1.apply(&q_gated.add(&read)?)?;
        let f = self.ffn2.apply(&self.ffn1.apply(&x)?.gelu()?)?;
        Ok((self.norm2.apply(&x.add(&f)?)?, attn))
    }
}

/// The full forecaster plus its parameter registry.
pub struct VarmaFormer {
    cfg: ModelConfig,
    params: ParamSet,
    vfe: Option<Vfe>,
    patch_embed: Linear,
    pos: Rc<Parameter>,
    alpha_param: Option<Rc<Parameter>>,
    q_dummy: Rc<Parameter>,
    q_input: Linear,
    decoder: Vec<DecoderLayer>,
    head: Linear,
}

impl VarmaFormer {
    /// Build a freshly initialized model. Identical (config, seed) pairs
    /// produce bit-identical parameters.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<VarmaFormer> {
        cfg.validate()?;
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let (d, n, m) = (cfg.d_model, cfg.n_patches(), cfg.n_queries());

        let patch_embed = Linear::new(&mut params, "embed.patch", cfg.patch_len, d, &mut rng)?;
        let pos = params.register(
            "embed.pos",
            &[n, d],
            layers::uniform_init(n * d, d, &mut rng),
            true,
        )?;
        let vfe = if cfg.vfe_enabled() {
            Some(Vfe::new(
                &mut params,
                cfg.ar_order,
                cfg.ma_order,
                cfg.patch_len,
                d,
                &mut rng,
            )?)
        } else {
            None
        };
        let alpha_param = if cfg.alpha_trainable {
            Some(params.register("alpha", &[1], vec![cfg.alpha], true)?)
        } else {
            None
        };
        let q_dummy = params.register(
            "queries.dummy",
            &[m, d],
            layers::uniform_init(m * d, d, &mut rng),
            true,
        )?;
        let q_input = Linear::new(&mut params, "queries.input", d, d, &mut rng)?;
        let mut decoder = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            decoder.push(DecoderLayer::new(&mut params, l, &cfg, &mut rng)?);
        }
        let head = Linear::new(&mut params, "head", d, cfg.patch_len, &mut rng)?;

        Ok(VarmaFormer {
            cfg,
            params,
            vfe,
            patch_embed,
            pos,
            alpha_param,
            q_dummy,
            q_input,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn vfe(&self) -> Option<&Vfe> {
        self.vfe.as_ref()
    }

    /// Fused key/value embedding: E = W_P(patches) + alpha * Z + PE.
    /// The feature term is skipped entirely when no branch is enabled or
    /// when alpha is fixed at zero, so the reduced model takes the exact
    /// code path of the plain baseline.
    pub fn embed(&self, patches: &Tensor) -> Result<Tensor> {
        let mut e = self.patch_embed.apply(patches)?;
        let use_features =
            self.vfe.is_some() && (self.cfg.alpha_trainable || self.cfg.alpha != 0.0);
        if use_features {
            let z = self.vfe.as_ref().unwrap().features(patches)?;
            let scaled = match &self.alpha_param {
                Some(a) => z.mul(&a.value())?,
                None => z.scale(self.cfg.alpha)?,
            };
            e = e.add(&scaled)?;
        }
        e.add(&self.pos.value())
    }

    fn check_patches(&self, patches: &Tensor) -> Result<()> {
        let expect = [self.cfg.n_patches(), self.cfg.patch_len];
        if patches.rank() != 3 || patches.shape()[1..] != expect {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: patches.shape().to_vec(),
                rhs: vec![0, expect[0], expect[1]],
            });
        }
        Ok(())
    }

    fn initial_queries(&self, rows: usize) -> Result<Tensor> {
        let q0 = self.q_input.apply(&self.q_dummy.value())?;
        Tensor::zeros(&[rows, self.cfg.n_queries(), self.cfg.d_model]).add(&q0)
    }

    fn bernoulli_keep_mask(&self, rows: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        use rand::Rng;
        let m = self.cfg.n_queries();
        let data: Vec<Real> = (0..rows * m)
            .map(|_| {
                if rng.gen::<f64>() < self.cfg.mask_rate as f64 {
                    0.0
                } else {
                    1.0
                }
            })
            .collect();
        Tensor::new(&[rows, m, 1], data)
    }

    /// Forward pass on normalized patches (rows x N x P) to normalized
    /// forecasts (rows x T). Rows are window-channel pairs; passing a
    /// mask RNG enables training-time query masking.
    pub fn forward_normalized(
        &self,
        patches: &Tensor,
        mut mask_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor> {
        self.forward_inner(patches, &mut mask_rng, None)
    }

    /// Same as [`Self::forward_normalized`] but also returns per-layer
    /// attention weights (rows x heads x M x N).
    pub fn forward_with_attention(&self, patches: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut attn = Vec::with_capacity(self.cfg.n_layers);
        let out = self.forward_inner(patches, &mut None, Some(&mut attn))?;
        Ok((out, attn))
    }

    fn forward_inner(
        &self,
        patches: &Tensor,
        mask_rng: &mut Option<&mut ChaCha8Rng>,
        mut collect_attn: Option<&mut Vec<Tensor>>,
    ) -> Result<Tensor> {
        self.check_patches(patches)?;
        let rows = patches.shape()[0];
        let e = self.embed(patches)?;
        let (k, v) = (e.clone(), e);
        let mut q = self.initial_queries(rows)?;
        for layer in &self.decoder {
            let mask = match mask_rng.as_deref_mut() {
                Some(rng) if self.cfg.mask_rate > 0.0 => {
                    Some(self.bernoulli_keep_mask(rows, rng)?)
                }
                _ => None,
            };
            let (next, attn) = layer.forward(&q, &k, &v, self.cfg.beta, mask.as_ref())?;
            if let Some(sink) = collect_attn.as_deref_mut() {
                sink.push(attn);
            }
            q = next;
        }
        let out = self.head.apply(&q)?;
        out.reshape(&[rows, self.cfg.horizon])
    }

    /// Full forecast path: normalize, patch, run the decoder stack, and
    /// invert the normalization with the window's own statistics.
    pub fn forecast(&self, window: &SeriesWindow) -> Result<Vec<Real>> {
        if window.lookback_len != self.cfg.lookback || window.horizon != self.cfg.horizon {
            return Err(Error::InvalidConfig(format!(
                "window ({}, {}) does not match model config ({}, {})",
                window.lookback_len, window.horizon, self.cfg.lookback, self.cfg.horizon
            )));
        }
        let norm = window.normalized_lookback();
        let seq = patchify(&norm, window.channels, self.cfg.lookback, self.cfg.patch_len)?;
        let patches = Tensor::new(&[window.channels, seq.count, seq.patch_len], seq.patches)?;
        let out = self.forward_normalized(&patches, None)?;
        Ok(denormalize(
            out.data(),
            window.channels,
            self.cfg.horizon,
            &window.mu,
            &window.sigma,
        ))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        checkpoint::save(self, path)
    }

    pub fn load(path: &std::path::Path) -> Result<VarmaFormer> {
        checkpoint::load(path)
    }
}
