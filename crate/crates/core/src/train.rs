//! Mini-batch training with adaptive-moment gradient descent, validation
//! model selection with early stopping, and MSE/MAE evaluation on the
//! normalized scale (the convention of the long-horizon benchmarks).

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{extract_window, patchify, Dataset};
use crate::error::{Error, Result};
use crate::model::VarmaFormer;
use crate::tensor::{backward, ParamSet, Tensor};
use crate::Real;

/// Training hyper-parameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop once this many consecutive epochs fail to improve validation
    /// MSE. Zero stops after the first epoch.
    pub patience: usize,
    pub learning_rate: Real,
    /// Multiplier applied to the learning rate on every non-improving
    /// (plateau) epoch.
    pub lr_decay: Real,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            max_epochs: 50,
            patience: 5,
            learning_rate: 1e-3,
            lr_decay: 0.5,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".to_string()));
        }
        if self.max_epochs == 0 {
            return Err(Error::InvalidConfig("max_epochs must be >= 1".to_string()));
        }
        if self.patience > self.max_epochs {
            return Err(Error::InvalidConfig(format!(
                "patience {} must be <= max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be > 0".to_string()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::InvalidConfig("lr_decay must be in (0, 1]".to_string()));
        }
        Ok(())
    }
}

/// Adaptive moment estimation with bias correction. Weight decay is off.
pub struct Adam {
    pub learning_rate: Real,
    beta1: Real,
    beta2: Real,
    epsilon: Real,
    step: u64,
    moments: HashMap<String, (Vec<Real>, Vec<Real>)>,
}

impl Adam {
    pub fn new(learning_rate: Real) -> Adam {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            moments: HashMap::new(),
        }
    }

    /// Apply one update from the gradients currently held by `params`.
    pub fn step(&mut self, params: &ParamSet) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for p in params.iter() {
            if !p.trainable() {
                continue;
            }
            let grad = p.grad_or_zero();
            let (m, v) = self
                .moments
                .entry(p.name().to_string())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            let mut data = p.data();
            for i in 0..grad.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
            p.set_data(data)?;
        }
        Ok(())
    }
}

/// A split's windows: dataset reference plus window origins.
pub struct WindowSet<'a> {
    pub dataset: &'a Dataset,
    pub origins: Vec<usize>,
    pub lookback: usize,
    pub horizon: usize,
}

impl<'a> WindowSet<'a> {
    pub fn new(dataset: &'a Dataset, origins: Vec<usize>, lookback: usize, horizon: usize) -> Self {
        WindowSet {
            dataset,
            origins,
            lookback,
            horizon,
        }
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    /// Stack the chosen windows into normalized model inputs and targets:
    /// patches (windows*channels x N x P) and targets (windows*channels x T).
    pub fn batch(&self, chosen: &[usize], patch_len: usize) -> Result<(Tensor, Tensor)> {
        let channels = self.dataset.channels();
        let n = self.lookback.div_ceil(patch_len);
        let rows = chosen.len() * channels;
        let mut patches = Vec::with_capacity(rows * n * patch_len);
        let mut targets = Vec::with_capacity(rows * self.horizon);
        for &idx in chosen {
            let w = extract_window(self.dataset, self.origins[idx], self.lookback, self.horizon);
            let norm = w.normalized_lookback();
            let seq = patchify(&norm, channels, self.lookback, patch_len)?;
            patches.extend_from_slice(&seq.patches);
            targets.extend_from_slice(&w.normalized_target());
        }
        Ok((
            Tensor::new(&[rows, n, patch_len], patches)?,
            Tensor::new(&[rows, self.horizon], targets)?,
        ))
    }
}

/// Mean squared error between prediction and target tensors.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let diff = pred.sub(target)?;
    diff.mul(&diff)?.mean_all()
}

/// Accumulates squared and absolute error over samples, channels, steps.
#[derive(Default, Clone, Copy)]
pub struct ErrorAccumulator {
    sq_sum: f64,
    abs_sum: f64,
    count: usize,
}

impl ErrorAccumulator {
    pub fn update(&mut self, pred: &[Real], target: &[Real]) {
        for (p, t) in pred.iter().zip(target) {
            let e = (p - t) as f64;
            self.sq_sum += e * e;
            self.abs_sum += e.abs();
        }
        self.count += pred.len();
    }

    pub fn mse(&self) -> Real {
        (self.sq_sum / self.count.max(1) as f64) as Real
    }

    pub fn mae(&self) -> Real {
        (self.abs_sum / self.count.max(1) as f64) as Real
    }
}

/// One epoch's record for the history CSV.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: Real,
    pub val_mse: Real,
    pub val_mae: Real,
    pub learning_rate: Real,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mse: Real,
    pub stopped_early: bool,
}

/// Train in place: adaptive-moment descent on MSE, per-epoch validation,
/// learning-rate decay on plateau, early stopping, and restoration of the
/// best-validation parameters.
pub fn train(
    model: &mut VarmaFormer,
    train_set: &WindowSet,
    val_set: &WindowSet,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let patch_len = model.config().patch_len;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut optimizer = Adam::new(cfg.learning_rate);
    let mut history = Vec::new();
    let mut best_val = Real::INFINITY;
    let mut best_epoch = 0;
    let mut best_snapshot = model.params().snapshot();
    let mut bad_epochs = 0;
    let mut stopped_early = false;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut train_acc = 0.0;
        let mut train_rows = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (patches, targets) = train_set.batch(chunk, patch_len)?;
            let pred = model.forward_normalized(&patches, Some(&mut rng))?;
            let loss = mse_loss(&pred, &targets)?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            train_acc += value as f64 * patches.shape()[0] as f64;
            train_rows += patches.shape()[0];
            model.params().zero_grad_all();
            backward(&loss)?;
            optimizer.step(model.params())?;
        }
        let train_mse = (train_acc / train_rows.max(1) as f64) as Real;
        let (val_mse, val_mae, _) = evaluate(model, val_set)?;
        if !val_mse.is_finite() {
            return Err(Error::Divergence { epoch });
        }

        let improved = val_mse < best_val;
        if improved {
            best_val = val_mse;
            best_epoch = epoch;
            best_snapshot = model.params().snapshot();
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            optimizer.learning_rate *= cfg.lr_decay;
        }
        history.push(EpochRecord {
            epoch,
            train_mse,
            val_mse,
            val_mae,
            learning_rate: optimizer.learning_rate,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
        if bad_epochs >= cfg.patience {
            stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }
    model.params().restore(&best_snapshot)?;
    Ok(TrainReport {
        history,
        best_epoch,
        best_val_mse: best_val,
        stopped_early,
    })
}

/// MSE/MAE on the normalized scale over every window in the set.
/// Never mutates model parameters. Returns (mse, mae, n_samples).
pub fn evaluate(model: &VarmaFormer, set: &WindowSet) -> Result<(Real, Real, usize)> {
    if set.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let patch_len = model.config().patch_len;
    let mut acc = ErrorAccumulator::default();
    let indices: Vec<usize> = (0..set.len()).collect();
    for chunk in indices.chunks(64) {
        let (patches, targets) = set.batch(chunk, patch_len)?;
        let pred = model.forward_normalized(&patches, None)?;
        acc.update(pred.data(), targets.data());
    }
    Ok((acc.mse(), acc.mae(), set.len()))
}

/// Schema version tag written as the first line of every metrics CSV.
pub const METRICS_SCHEMA: &str = "# schema=varmaformer-metrics-v1";
/// Column header of the metrics CSV.
pub const METRICS_HEADER: &str = "dataset,horizon,ablation,seed,epoch,split,mse,mae,wall_time_s";

/// One row of the metrics/history CSV.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub dataset: String,
    pub horizon: usize,
    pub ablation: String,
    pub seed: u64,
    pub epoch: usize,
    pub split: String,
    pub mse: Real,
    pub mae: Real,
    pub wall_time_s: f64,
}

impl MetricsRow {
    fn render(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.6},{:.6},{:.3}",
            self.dataset,
            self.horizon,
            self.ablation,
            self.seed,
            self.epoch,
            self.split,
            self.mse,
            self.mae,
            self.wall_time_s
        )
    }
}

/// Write a metrics CSV with the schema comment and header.
pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{METRICS_SCHEMA}")?;
    writeln!(f, "{METRICS_HEADER}")?;
    for row in rows {
        writeln!(f, "{}", row.render())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{window_origins, Dataset};
    use crate::model::ModelConfig;
    use crate::oracle::{generate, SyntheticKind, SyntheticSpec};

    fn tiny_model_config() -> ModelConfig {
        ModelConfig {
            lookback: 8,
            horizon: 4,
            patch_len: 2,
            d_model: 8,
            n_layers: 1,
            n_heads: 1,
            ffn_width: 16,
            mask_rate: 0.1,
            ..ModelConfig::default()
        }
    }

    fn tiny_dataset(len: usize) -> Dataset {
        generate(&SyntheticSpec {
            kind: SyntheticKind::Ar,
            phi: vec![0.6],
            theta: vec![],
            noise_std: 0.2,
            length: len,
            channels: 1,
            seed: 7,
        })
        .unwrap()
    }

    #[test]
    fn adam_learns_a_slope_of_two() {
        // One-parameter linear model on y = 2x.
        let mut params = ParamSet::new();
        let w = params.register("w", &[1], vec![0.0], true).unwrap();
        let xs: Vec<Real> = (0..16).map(|i| (i as Real - 8.0) / 4.0).collect();
        let ys: Vec<Real> = xs.iter().map(|&x| 2.0 * x).collect();
        let x = Tensor::new(&[16], xs).unwrap();
        let y = Tensor::new(&[16], ys).unwrap();
        let mut opt = Adam::new(0.05);
        for _ in 0..400 {
            let pred = x.mul(&w.value()).unwrap();
            let loss = mse_loss(&pred, &y).unwrap();
            params.zero_grad_all();
            backward(&loss).unwrap();
            opt.step(&params).unwrap();
        }
        let slope = w.data()[0];
        assert!((slope - 2.0).abs() < 1e-2, "slope {slope}");
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters_unchanged() {
        let mut params = ParamSet::new();
        let w = params.register("w", &[3], vec![1.0, -2.0, 0.5], true).unwrap();
        let before = w.data();
        let mut opt = Adam::new(0.1);
        params.zero_grad_all();
        opt.step(&params).unwrap();
        assert_eq!(w.data(), before);
    }

    #[test]
    fn train_loss_decreases_on_tiny_synthetic_run() {
        let ds = tiny_dataset(200);
        let cfg = tiny_model_config();
        // 64 training windows, a handful for validation.
        let train_origins: Vec<usize> = (0..64).collect();
        let val_origins: Vec<usize> = (64..80).collect();
        let train_set = WindowSet::new(&ds, train_origins, cfg.lookback, cfg.horizon);
        let val_set = WindowSet::new(&ds, val_origins, cfg.lookback, cfg.horizon);
        let mut model = VarmaFormer::new(cfg, 1).unwrap();
        let tc = TrainConfig {
            batch_size: 16,
            max_epochs: 20,
            patience: 20,
            learning_rate: 1e-3,
            lr_decay: 0.5,
            seed: 3,
        };
        let report = train(&mut model, &train_set, &val_set, &tc).unwrap();
        for w in report.history.windows(2).take(4) {
            assert!(
                w[1].train_mse < w[0].train_mse,
                "train loss should decrease over the first epochs: {} -> {}",
                w[0].train_mse,
                w[1].train_mse
            );
        }
    }

    #[test]
    fn patience_zero_runs_exactly_one_epoch() {
        let ds = tiny_dataset(120);
        let cfg = tiny_model_config();
        let train_set = WindowSet::new(&ds, (0..32).collect(), cfg.lookback, cfg.horizon);
        let val_set = WindowSet::new(&ds, (32..40).collect(), cfg.lookback, cfg.horizon);
        let mut model = VarmaFormer::new(cfg, 2).unwrap();
        let tc = TrainConfig {
            patience: 0,
            max_epochs: 10,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &train_set, &val_set, &tc).unwrap();
        assert_eq!(report.history.len(), 1);
    }

    #[test]
    fn divergence_reports_epoch() {
        let ds = tiny_dataset(120);
        let cfg = tiny_model_config();
        let train_set = WindowSet::new(&ds, (0..16).collect(), cfg.lookback, cfg.horizon);
        let val_set = WindowSet::new(&ds, (16..24).collect(), cfg.lookback, cfg.horizon);
        let mut model = VarmaFormer::new(cfg, 3).unwrap();
        let tc = TrainConfig {
            learning_rate: 1e14,
            max_epochs: 5,
            patience: 5,
            ..TrainConfig::default()
        };
        match train(&mut model, &train_set, &val_set, &tc) {
            Err(Error::Divergence { epoch }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn evaluate_perfect_predictor_is_zero() {
        let mut acc = ErrorAccumulator::default();
        let target = [0.3, -1.2, 4.5];
        acc.update(&target, &target);
        assert_eq!(acc.mse(), 0.0);
        assert_eq!(acc.mae(), 0.0);
    }

    #[test]
    fn evaluate_zero_predictor_equals_mean_square_of_targets() {
        let targets = [0.5, -1.5, 2.0, -0.25];
        let zeros = [0.0; 4];
        let mut acc = ErrorAccumulator::default();
        acc.update(&zeros, &targets);
        let expect: Real = targets.iter().map(|t| t * t).sum::<Real>() / 4.0;
        assert!((acc.mse() - expect).abs() < 1e-12);
    }

    #[test]
    fn evaluate_does_not_mutate_parameters() {
        let ds = tiny_dataset(120);
        let cfg = tiny_model_config();
        let set = WindowSet::new(&ds, (0..12).collect(), cfg.lookback, cfg.horizon);
        let model = VarmaFormer::new(cfg, 4).unwrap();
        let before = model.params().state_hash();
        evaluate(&model, &set).unwrap();
        assert_eq!(model.params().state_hash(), before);
    }

    #[test]
    fn evaluate_rejects_empty_set() {
        let ds = tiny_dataset(120);
        let cfg = tiny_model_config();
        let set = WindowSet::new(&ds, vec![], cfg.lookback, cfg.horizon);
        let model = VarmaFormer::new(cfg, 5).unwrap();
        assert!(matches!(evaluate(&model, &set), Err(Error::EmptyEvalSet)));
    }

    #[test]
    fn seed_determinism_end_to_end() {
        let run = || {
            let ds = tiny_dataset(160);
            let cfg = tiny_model_config();
            let ranges = crate::data::split(
                &ds,
                &crate::data::SplitPolicy::Ratio {
                    train: 0.7,
                    val: 0.1,
                    test: 0.2,
                },
                cfg.lookback,
                cfg.horizon,
            )
            .unwrap();
            let train_set = WindowSet::new(
                &ds,
                window_origins(&ranges.train, cfg.lookback, cfg.horizon),
                cfg.lookback,
                cfg.horizon,
            );
            let val_set = WindowSet::new(
                &ds,
                window_origins(&ranges.val, cfg.lookback, cfg.horizon),
                cfg.lookback,
                cfg.horizon,
            );
            let test_set = WindowSet::new(
                &ds,
                window_origins(&ranges.test, cfg.lookback, cfg.horizon),
                cfg.lookback,
                cfg.horizon,
            );
            let mut model = VarmaFormer::new(cfg, 11).unwrap();
            let tc = TrainConfig {
                max_epochs: 3,
                patience: 3,
                ..TrainConfig::default()
            };
            train(&mut model, &train_set, &val_set, &tc).unwrap();
            let (mse, mae, _) = evaluate(&model, &test_set).unwrap();
            (mse.to_bits(), mae.to_bits())
        };
        assert_eq!(run(), run());
    }
}
