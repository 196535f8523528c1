//! Independent verification machinery: synthetic series generators,
//! naive baselines, and a scalar-loop reference forward pass that shares
//! no code with the tensor engine.

pub mod reference;

pub use reference::{reference_forward, ParamMap, REFERENCE_CEILING};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;

use crate::data::{extract_window, Dataset, SeriesWindow};
use crate::error::{Error, Result};
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Pure autoregression: x_t = sum phi_i x_{t-i} + e_t.
    Ar,
    /// ARMA per channel with shared coefficients and independent noise:
    /// x_t = sum phi_i x_{t-i} + e_t + sum theta_j e_{t-j}.
    Varma,
    /// sin(2 pi t / period_c) + e_t with period 24 * (channel + 1).
    SinePlusNoise,
}

impl SyntheticKind {
    pub fn parse(s: &str) -> Result<SyntheticKind> {
        match s {
            "ar" => Ok(SyntheticKind::Ar),
            "varma" => Ok(SyntheticKind::Varma),
            "sine-plus-noise" => Ok(SyntheticKind::SinePlusNoise),
            other => Err(Error::InvalidConfig(format!(
                "unknown synthetic kind {other:?} (expected ar|varma|sine-plus-noise)"
            ))),
        }
    }
}

/// Recipe for a reproducible synthetic dataset. Noise is Gaussian drawn
/// from a ChaCha8 stream, so runs are reproducible across machines.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub phi: Vec<Real>,
    pub theta: Vec<Real>,
    pub noise_std: Real,
    pub length: usize,
    pub channels: usize,
    pub seed: u64,
}

const BURN_IN: usize = 200;

/// All roots of z^p + c_1 z^(p-1) + ... + c_p strictly inside the unit
/// circle (Schur-Cohn recursion). `poly` starts with the leading 1.
fn roots_inside_unit_circle(poly: &[Real]) -> bool {
    let mut a = poly.to_vec();
    while a.len() > 1 {
        let n = a.len();
        let r = a[n - 1] / a[0];
        if !r.is_finite() || r.abs() >= 1.0 {
            return false;
        }
        let denom = 1.0 - r * r;
        let mut b = vec![0.0; n - 1];
        for i in 0..n - 1 {
            b[i] = (a[i] - r * a[n - 1 - i]) / denom;
        }
        a = b;
    }
    true
}

/// Spectral radius of the AR companion matrix is below one, i.e. the
/// characteristic polynomial z^p - phi_1 z^(p-1) - ... - phi_p has all
/// roots inside the unit circle.
pub fn is_stationary(phi: &[Real]) -> bool {
    if phi.is_empty() {
        return true;
    }
    let mut poly = Vec::with_capacity(phi.len() + 1);
    poly.push(1.0);
    poly.extend(phi.iter().map(|&c| -c));
    roots_inside_unit_circle(&poly)
}

/// Generate a reproducible synthetic dataset.
///
/// With noise, 200 burn-in steps are discarded so the process starts near
/// its stationary distribution. Noiseless AR/ARMA skips the burn-in and
/// starts from unit initial state (otherwise the recursion would have
/// decayed to zero before the kept samples begin).
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.length == 0 || spec.channels == 0 {
        return Err(Error::InvalidConfig(
            "synthetic length and channels must be >= 1".to_string(),
        ));
    }
    if matches!(spec.kind, SyntheticKind::Ar | SyntheticKind::Varma) && !is_stationary(&spec.phi) {
        return Err(Error::NonStationary(format!(
            "AR coefficients {:?} put the companion spectral radius at or above 1",
            spec.phi
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = rand_distr::Normal::new(0.0f64, 1.0).unwrap();
    let mut draw = |std: Real| -> Real {
        if std == 0.0 {
            0.0
        } else {
            normal.sample(&mut rng) as Real * std
        }
    };

    let mut columns: Vec<Vec<Real>> = Vec::with_capacity(spec.channels);
    for c in 0..spec.channels {
        let series = match spec.kind {
            SyntheticKind::SinePlusNoise => {
                let period = 24.0 * (c + 1) as Real;
                (0..spec.length)
                    .map(|t| {
                        let phase = 2.0 * std::f64::consts::PI as Real * t as Real / period;
                        phase.sin() + draw(spec.noise_std)
                    })
                    .collect()
            }
            SyntheticKind::Ar | SyntheticKind::Varma => {
                let theta: &[Real] = if spec.kind == SyntheticKind::Ar {
                    &[]
                } else {
                    &spec.theta
                };
                let burn = if spec.noise_std == 0.0 { 0 } else { BURN_IN };
                let p = spec.phi.len();
                let q = theta.len();
                let total = burn + spec.length;
                let init = if spec.noise_std == 0.0 { 1.0 } else { 0.0 };
                let mut x = vec![init; p];
                let mut e = vec![0.0; q];
                let mut out = Vec::with_capacity(total);
                for _ in 0..total {
                    let e_t = draw(spec.noise_std);
                    let mut v = e_t;
                    for (i, &phi) in spec.phi.iter().enumerate() {
                        v += phi * x[p - 1 - i];
                    }
                    for (j, &th) in theta.iter().enumerate() {
                        v += th * e[q - 1 - j];
                    }
                    out.push(v);
                    if p > 0 {
                        x.rotate_left(1);
                        x[p - 1] = v;
                    }
                    if q > 0 {
                        e.rotate_left(1);
                        e[q - 1] = e_t;
                    }
                }
                out.split_off(burn)
            }
        };
        columns.push(series);
    }

    let rows: Vec<Vec<Real>> = (0..spec.length)
        .map(|t| columns.iter().map(|col| col[t]).collect())
        .collect();
    let names = (0..spec.channels).map(|c| format!("ch{c}")).collect();
    let kind = match spec.kind {
        SyntheticKind::Ar => "ar",
        SyntheticKind::Varma => "varma",
        SyntheticKind::SinePlusNoise => "sine",
    };
    Dataset::from_values(&format!("synthetic-{kind}-{}", spec.seed), names, rows, "1h")
}

/// Repeat the last observed value across the horizon, raw scale.
pub fn persistence(window: &SeriesWindow) -> Vec<Real> {
    let (c, l, t) = (window.channels, window.lookback_len, window.horizon);
    let mut out = vec![0.0; c * t];
    for ci in 0..c {
        let last = window.lookback[ci * l + l - 1];
        for k in 0..t {
            out[ci * t + k] = last;
        }
    }
    out
}

/// Persistence forecast on the normalized scale of the window.
pub fn persistence_normalized(window: &SeriesWindow) -> Vec<Real> {
    let (c, t) = (window.channels, window.horizon);
    let raw = persistence(window);
    let mut out = vec![0.0; c * t];
    for ci in 0..c {
        for k in 0..t {
            out[ci * t + k] = (raw[ci * t + k] - window.mu[ci]) / window.sigma[ci];
        }
    }
    out
}

/// Channel-shared least-squares map from normalized lookback (plus bias)
/// to normalized horizon, fit over pooled (window, channel) samples.
pub struct LinearBaseline {
    weights: Vec<Real>, // (lookback + 1) x horizon
    lookback: usize,
    horizon: usize,
}

impl LinearBaseline {
    pub fn fit(ds: &Dataset, origins: &[usize], lookback: usize, horizon: usize) -> Result<LinearBaseline> {
        if origins.is_empty() {
            return Err(Error::EmptyEvalSet);
        }
        let d = lookback + 1;
        let mut xtx = vec![0.0; d * d];
        let mut xty = vec![0.0; d * horizon];
        let mut row = vec![0.0; d];
        for &origin in origins {
            let w = extract_window(ds, origin, lookback, horizon);
            let xn = w.normalized_lookback();
            let yn = w.normalized_target();
            for c in 0..w.channels {
                row[..lookback].copy_from_slice(&xn[c * lookback..(c + 1) * lookback]);
                row[lookback] = 1.0;
                let y = &yn[c * horizon..(c + 1) * horizon];
                for i in 0..d {
                    let xi = row[i];
                    if xi == 0.0 {
                        continue;
                    }
                    for j in i..d {
                        xtx[i * d + j] += xi * row[j];
                    }
                    for (k, &yv) in y.iter().enumerate() {
                        xty[i * horizon + k] += xi * yv;
                    }
                }
            }
        }
        // Mirror the upper triangle and add a small ridge for conditioning.
        for i in 0..d {
            for j in 0..i {
                xtx[i * d + j] = xtx[j * d + i];
            }
        }
        let trace: Real = (0..d).map(|i| xtx[i * d + i]).sum();
        let ridge = 1e-9 * (trace / d as Real).max(1e-12);
        for i in 0..d {
            xtx[i * d + i] += ridge;
        }
        let chol = cholesky(&xtx, d)?;
        let mut weights = vec![0.0; d * horizon];
        let mut rhs = vec![0.0; d];
        for k in 0..horizon {
            for i in 0..d {
                rhs[i] = xty[i * horizon + k];
            }
            let sol = cholesky_solve(&chol, d, &rhs);
            for i in 0..d {
                weights[i * horizon + k] = sol[i];
            }
        }
        Ok(LinearBaseline {
            weights,
            lookback,
            horizon,
        })
    }

    pub fn predict_normalized(&self, window: &SeriesWindow) -> Vec<Real> {
        let (c, l, t) = (window.channels, self.lookback, self.horizon);
        let xn = window.normalized_lookback();
        let mut out = vec![0.0; c * t];
        for ci in 0..c {
            for k in 0..t {
                let mut acc = self.weights[l * t + k]; // bias row
                for i in 0..l {
                    acc += xn[ci * l + i] * self.weights[i * t + k];
                }
                out[ci * t + k] = acc;
            }
        }
        out
    }

    pub fn predict(&self, window: &SeriesWindow) -> Vec<Real> {
        let norm = self.predict_normalized(window);
        crate::data::denormalize(&norm, window.channels, self.horizon, &window.mu, &window.sigma)
    }
}

fn cholesky(a: &[Real], n: usize) -> Result<Vec<Real>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(Error::InvalidConfig(
                        "normal equations are not positive definite".to_string(),
                    ));
                }
                l[i * n + j] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    Ok(l)
}

fn cholesky_solve(l: &[Real], n: usize, b: &[Real]) -> Vec<Real> {
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[i * n + k] * y[k];
        }
        y[i] = sum / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in i + 1..n {
            sum -= l[k * n + i] * x[k];
        }
        x[i] = sum / l[i * n + i];
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::window_origins;

    #[test]
    fn noiseless_ar1_is_geometric_decay() {
        let ds = generate(&SyntheticSpec {
            kind: SyntheticKind::Ar,
            phi: vec![0.9],
            theta: vec![],
            noise_std: 0.0,
            length: 50,
            channels: 1,
            seed: 0,
        })
        .unwrap();
        assert_eq!(ds.value(0, 0), 0.9); // x_1 = 0.9 * x_0 with x_0 = 1
        for t in 1..50 {
            let expect = 0.9 * ds.value(t - 1, 0);
            assert!((ds.value(t, 0) - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn noiseless_sine_is_exact() {
        let ds = generate(&SyntheticSpec {
            kind: SyntheticKind::SinePlusNoise,
            phi: vec![],
            theta: vec![],
            noise_std: 0.0,
            length: 48,
            channels: 1,
            seed: 0,
        })
        .unwrap();
        for t in 0..48 {
            let expect = (2.0 * std::f64::consts::PI as Real * t as Real / 24.0).sin();
            assert_eq!(ds.value(t, 0), expect);
        }
    }

    #[test]
    fn rejects_non_stationary_coefficients() {
        for phi in [vec![1.2], vec![0.5, 0.6], vec![1.0]] {
            let err = generate(&SyntheticSpec {
                kind: SyntheticKind::Ar,
                phi,
                theta: vec![],
                noise_std: 0.1,
                length: 10,
                channels: 1,
                seed: 0,
            })
            .unwrap_err();
            assert!(matches!(err, Error::NonStationary(_)));
        }
    }

    #[test]
    fn stationarity_boundary_cases() {
        assert!(is_stationary(&[0.99]));
        assert!(!is_stationary(&[1.0]));
        assert!(is_stationary(&[0.5, 0.3]));
        assert!(!is_stationary(&[0.5, 0.6]));
        assert!(is_stationary(&[])); // white noise
    }

    #[test]
    fn generator_is_deterministic_by_seed() {
        let spec = SyntheticSpec {
            kind: SyntheticKind::Varma,
            phi: vec![0.4, 0.2],
            theta: vec![0.3],
            noise_std: 0.5,
            length: 100,
            channels: 2,
            seed: 123,
        };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        for t in 0..100 {
            for c in 0..2 {
                assert_eq!(a.value(t, c), b.value(t, c));
            }
        }
        let c = generate(&SyntheticSpec { seed: 124, ..spec }).unwrap();
        assert_ne!(a.value(0, 0), c.value(0, 0));
    }

    #[test]
    fn ar2_lag1_autocorrelation_matches_yule_walker() {
        // rho_1 = phi_1 / (1 - phi_2) = 0.5 / 0.7 = 0.714...
        let ds = generate(&SyntheticSpec {
            kind: SyntheticKind::Ar,
            phi: vec![0.5, 0.3],
            theta: vec![],
            noise_std: 1.0,
            length: 100_000,
            channels: 1,
            seed: 9,
        })
        .unwrap();
        let n = ds.rows();
        let mean: Real = (0..n).map(|t| ds.value(t, 0)).sum::<Real>() / n as Real;
        let mut num = 0.0;
        let mut den = 0.0;
        for t in 0..n {
            let d0 = ds.value(t, 0) - mean;
            den += d0 * d0;
            if t + 1 < n {
                num += d0 * (ds.value(t + 1, 0) - mean);
            }
        }
        let rho1 = num / den;
        let theory = 0.5 / (1.0 - 0.3);
        assert!((rho1 - theory).abs() < 0.05, "rho1 {rho1} vs {theory}");
    }

    #[test]
    fn ar1_variance_matches_closed_form_within_5_percent() {
        // gamma_0 = sigma^2 / (1 - phi^2)
        let ds = generate(&SyntheticSpec {
            kind: SyntheticKind::Ar,
            phi: vec![0.8],
            theta: vec![],
            noise_std: 1.0,
            length: 100_000,
            channels: 1,
            seed: 10,
        })
        .unwrap();
        let n = ds.rows();
        let mean: Real = (0..n).map(|t| ds.value(t, 0)).sum::<Real>() / n as Real;
        let var: Real = (0..n)
            .map(|t| (ds.value(t, 0) - mean).powi(2))
            .sum::<Real>()
            / n as Real;
        let theory = 1.0 / (1.0 - 0.64);
        assert!(mean.abs() < 0.1, "mean {mean}");
        assert!((var - theory).abs() / theory < 0.05, "var {var} vs {theory}");
    }

    #[test]
    fn persistence_on_constant_series_has_zero_error() {
        let w = SeriesWindow::from_raw(vec![4.0; 8], vec![4.0; 4], 1, 8, 4, 0);
        let pred = persistence(&w);
        assert_eq!(pred, w.target);
    }

    #[test]
    fn linear_baseline_nails_noiseless_ar1() {
        let ds = generate(&SyntheticSpec {
            kind: SyntheticKind::Ar,
            phi: vec![0.9],
            theta: vec![],
            noise_std: 0.0,
            length: 400,
            channels: 1,
            seed: 0,
        })
        .unwrap();
        let (l, t) = (16, 8);
        let train: Vec<usize> = window_origins(&(0..300), l, t);
        let test: Vec<usize> = window_origins(&(300..400), l, t);
        let baseline = LinearBaseline::fit(&ds, &train, l, t).unwrap();
        let mut acc = crate::train::ErrorAccumulator::default();
        for origin in test {
            let w = extract_window(&ds, origin, l, t);
            acc.update(&baseline.predict_normalized(&w), &w.normalized_target());
        }
        assert!(acc.mse() < 1e-6, "mse {}", acc.mse());
    }
}
