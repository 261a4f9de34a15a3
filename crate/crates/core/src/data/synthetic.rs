//! Seeded synthetic streams that carry their analytic ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::SeriesFrame;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::forecaster::{Forecaster, Shapes};

/// Start of every synthetic clock (2020-01-01T00:00:00Z), hourly steps.
const EPOCH: i64 = 1_577_836_800;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Exactly periodic series `y`. The matched backbone is seasonal
    /// selection shifted down by `bias`, so its residual is `+bias`.
    Bias {
        bias: f64,
        #[serde(default = "default_period")]
        period: usize,
        #[serde(default)]
        noise: f64,
    },
    /// AR(1) around a linearly drifting mean.
    ArDrift {
        #[serde(default = "default_phi")]
        phi: f64,
        drift: f64,
        #[serde(default = "one")]
        noise: f64,
    },
    /// AR(1) whose mean jumps by `shift` at row `at`.
    RegimeShift {
        #[serde(default = "default_phi")]
        phi: f64,
        shift: f64,
        at: usize,
        #[serde(default = "one")]
        noise: f64,
    },
    /// `covariates` AR(1) columns `x0..`; `y_t = coef · Σ_{j∈planted} x_{t−lag, j} + noise`.
    PlantedFeatures {
        #[serde(default = "default_covariates")]
        covariates: usize,
        #[serde(default = "default_planted")]
        planted: Vec<usize>,
        #[serde(default = "one_usize")]
        lag: usize,
        #[serde(default = "default_phi")]
        phi: f64,
        #[serde(default = "one")]
        coef: f64,
        #[serde(default = "default_small_noise")]
        noise: f64,
    },
    /// Bernoulli `flag` column; `y_t = σ(flag_{t−1})·ε_t` with σ ∈ {low, high}.
    Heteroscedastic {
        #[serde(default = "one")]
        sigma_low: f64,
        #[serde(default = "three")]
        sigma_high: f64,
        #[serde(default = "half")]
        p_high: f64,
    },
    /// i.i.d. `N(mean, sigma²)`.
    ExchangeableGaussian {
        #[serde(default)]
        mean: f64,
        #[serde(default = "one")]
        sigma: f64,
    },
}

fn default_period() -> usize {
    24
}
fn default_phi() -> f64 {
    0.7
}
fn one() -> f64 {
    1.0
}
fn three() -> f64 {
    3.0
}
fn half() -> f64 {
    0.5
}
fn one_usize() -> usize {
    1
}
fn default_covariates() -> usize {
    10
}
fn default_planted() -> Vec<usize> {
    vec![2, 5]
}
fn default_small_noise() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    #[serde(flatten)]
    pub kind: SyntheticKind,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(kind: SyntheticKind, seed: u64) -> Self {
        SyntheticSpec { kind, seed }
    }
}

/// Analytic ground truth of a generated stream.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Oracle {
    pub kind: String,
    pub target: String,
    pub inputs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub true_bias: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub period: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shift_time: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shift_size: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub planted_cols: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lag: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
}

impl Oracle {
    /// The linear backbone whose residual on a `Bias` stream is exactly the
    /// planted bias: seasonal selection minus `bias`. Requires `L ≥ period`.
    pub fn matched_backbone(&self, lookback: usize, horizon: usize) -> Result<Forecaster> {
        let (Some(b), Some(p)) = (self.true_bias, self.period) else {
            return Err(Error::Config("matched backbone exists only for bias streams".into()));
        };
        if lookback < p {
            return Err(Error::Config(format!("lookback {lookback} shorter than period {p}")));
        }
        let shapes = Shapes::new(lookback, 1, horizon, 1);
        let mut w = Tensor::zeros(&[horizon, lookback]);
        for h in 0..horizon {
            w.data_mut()[h * lookback + lookback - p + h % p] = 1.0;
        }
        Forecaster::linear(shapes, w, Tensor::filled(&[1, horizon], -b))
    }
}

fn normal(sd: f64) -> Result<Normal<f64>> {
    Normal::new(0.0, sd).map_err(|e| Error::Config(format!("noise scale {sd}: {e}")))
}

fn ar1(rng: &mut ChaCha8Rng, t: usize, phi: f64, noise: &Normal<f64>, mean: impl Fn(usize) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(t);
    let mut dev = 0.0;
    for i in 0..t {
        dev = phi * dev + noise.sample(rng);
        out.push(mean(i) + dev);
    }
    out
}

/// Generates `t` rows of the stream described by `spec`.
pub fn generate(spec: &SyntheticSpec, t: usize) -> Result<(SeriesFrame, Oracle)> {
    if t == 0 {
        return Err(Error::Config("synthetic length must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut oracle = Oracle { target: "y".into(), ..Oracle::default() };
    let (names, columns): (Vec<String>, Vec<Vec<f64>>) = match &spec.kind {
        SyntheticKind::Bias { bias, period, noise } => {
            if *period == 0 {
                return Err(Error::Config("period must be positive".into()));
            }
            let base = normal(0.5)?;
            let pattern: Vec<f64> = (0..*period)
                .map(|k| (std::f64::consts::TAU * k as f64 / *period as f64).sin() + base.sample(&mut rng))
                .collect();
            let eps = normal(noise.max(0.0))?;
            let y =
                (0..t).map(|i| pattern[i % period] + if *noise > 0.0 { eps.sample(&mut rng) } else { 0.0 }).collect();
            oracle.kind = "bias".into();
            oracle.true_bias = Some(*bias);
            oracle.period = Some(*period);
            (vec!["y".into()], vec![y])
        }
        SyntheticKind::ArDrift { phi, drift, noise } => {
            let eps = normal(*noise)?;
            let y = ar1(&mut rng, t, *phi, &eps, |i| drift * i as f64);
            oracle.kind = "ar_drift".into();
            (vec!["y".into()], vec![y])
        }
        SyntheticKind::RegimeShift { phi, shift, at, noise } => {
            let eps = normal(*noise)?;
            let y = ar1(&mut rng, t, *phi, &eps, |i| if i >= *at { *shift } else { 0.0 });
            oracle.kind = "regime_shift".into();
            oracle.shift_time = Some(*at);
            oracle.shift_size = Some(*shift);
            (vec!["y".into()], vec![y])
        }
        SyntheticKind::PlantedFeatures { covariates, planted, lag, phi, coef, noise } => {
            if let Some(&bad) = planted.iter().find(|&&j| j >= *covariates) {
                return Err(Error::Config(format!("planted column {bad} ≥ covariate count {covariates}")));
            }
            let unit = normal(1.0)?;
            let xs: Vec<Vec<f64>> = (0..*covariates).map(|_| ar1(&mut rng, t, *phi, &unit, |_| 0.0)).collect();
            let eps = normal(*noise)?;
            let y = (0..t)
                .map(|i| {
                    let signal: f64 =
                        if i >= *lag { planted.iter().map(|&j| xs[j][i - lag]).sum::<f64>() * coef } else { 0.0 };
                    signal + eps.sample(&mut rng)
                })
                .collect();
            oracle.kind = "planted_features".into();
            oracle.planted_cols = Some(planted.clone());
            oracle.lag = Some(*lag);
            let mut names: Vec<String> = (0..*covariates).map(|j| format!("x{j}")).collect();
            oracle.inputs = names.clone();
            names.push("y".into());
            let mut cols = xs;
            cols.push(y);
            (names, cols)
        }
        SyntheticKind::Heteroscedastic { sigma_low, sigma_high, p_high } => {
            if !(0.0..=1.0).contains(p_high) || *sigma_low <= 0.0 || *sigma_high <= 0.0 {
                return Err(Error::Config("heteroscedastic needs p ∈ [0,1] and positive scales".into()));
            }
            let unit = normal(1.0)?;
            let flag: Vec<f64> = (0..t).map(|_| f64::from(u8::from(rng.random::<f64>() < *p_high))).collect();
            let y = (0..t)
                .map(|i| {
                    let high = i > 0 && flag[i - 1] > 0.5;
                    let s = if high { *sigma_high } else { *sigma_low };
                    s * unit.sample(&mut rng)
                })
                .collect();
            oracle.kind = "heteroscedastic".into();
            oracle.sigma_ratio = Some(sigma_high / sigma_low);
            oracle.lag = Some(1);
            (vec!["flag".into(), "y".into()], vec![flag, y])
        }
        SyntheticKind::ExchangeableGaussian { mean, sigma } => {
            let eps = normal(*sigma)?;
            let y = (0..t).map(|_| mean + eps.sample(&mut rng)).collect();
            oracle.kind = "exchangeable_gaussian".into();
            oracle.sigma = Some(*sigma);
            (vec!["y".into()], vec![y])
        }
    };
    if oracle.inputs.is_empty() {
        oracle.inputs = names.clone();
    }
    let d = columns.len();
    let data: Vec<f64> = (0..t).flat_map(|i| columns.iter().map(move |c| c[i])).collect();
    let frame =
        SeriesFrame::new((0..t as i64).map(|i| EPOCH + 3600 * i).collect(), Tensor::new(data, vec![t, d])?, names)?;
    Ok((frame, oracle))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_windows, SplitFractions, WindowConfig};

    #[test]
    fn bias_residual_is_exact() {
        let spec = SyntheticSpec::new(SyntheticKind::Bias { bias: 0.05, period: 6, noise: 0.0 }, 3);
        let (frame, oracle) = generate(&spec, 80).unwrap();
        let mut cfg = WindowConfig::new(12, 4, vec!["y".into()]);
        cfg.standardize = false;
        cfg.splits = SplitFractions::all_train();
        let ws = make_windows(&frame, &cfg).unwrap();
        let f = oracle.matched_backbone(12, 4).unwrap();
        for w in ws.all() {
            let r = w.y.sub(&f.predict(&w.x).unwrap()).unwrap();
            assert!(r.data().iter().all(|v| (v - 0.05).abs() < 1e-12));
        }
    }

    #[test]
    fn gaussian_sample_std() {
        let spec = SyntheticSpec::new(SyntheticKind::ExchangeableGaussian { mean: 0.0, sigma: 1.0 }, 11);
        let (frame, _) = generate(&spec, 100_000).unwrap();
        let y = frame.column(0);
        let mu = y.iter().sum::<f64>() / y.len() as f64;
        let sd = (y.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (y.len() - 1) as f64).sqrt();
        assert!((0.99..=1.01).contains(&sd), "{sd}");
    }

    #[test]
    fn regime_shift_metadata() {
        let spec = SyntheticSpec::new(SyntheticKind::RegimeShift { phi: 0.5, shift: 3.0, at: 500, noise: 0.2 }, 1);
        let (frame, oracle) = generate(&spec, 1000).unwrap();
        assert_eq!(oracle.shift_time, Some(500));
        let y = frame.column(0);
        let before = y[..500].iter().sum::<f64>() / 500.0;
        let after = y[500..].iter().sum::<f64>() / 500.0;
        assert!((after - before - 3.0).abs() < 0.2);
    }

    #[test]
    fn deterministic_per_seed() {
        let spec =
            SyntheticSpec::new(SyntheticKind::Heteroscedastic { sigma_low: 1.0, sigma_high: 3.0, p_high: 0.5 }, 9);
        assert_eq!(generate(&spec, 200).unwrap(), generate(&spec, 200).unwrap());
    }

    #[test]
    fn spec_json_roundtrip() {
        let json = r#"{"kind":"planted_features","seed":4}"#;
        let spec: SyntheticSpec = serde_json::from_str(json).unwrap();
        match &spec.kind {
            SyntheticKind::PlantedFeatures { covariates, planted, .. } => {
                assert_eq!(*covariates, 10);
                assert_eq!(planted, &vec![2, 5]);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(spec.seed, 4);
    }
}
