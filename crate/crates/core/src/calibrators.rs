//! Distributional correctors over a frozen point forecaster.
//!
//! [`QuantileCalibrator`] emits a strictly increasing quantile fan anchored
//! near `Ŷ`; [`ConformalCalibrator`] learns a per-horizon scale `w` and
//! calibrates a split-conformal radius `κ_α` on held-out windows.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::summary_features;
use crate::autodiff::{softplus, Dense, Mlp, ParamSet, Tape, Tensor, Var};
use crate::data::Window;
use crate::error::{Error, Result};
use crate::forecaster::{Forecaster, Shapes};

/// Default quantile levels.
pub const DEFAULT_LEVELS: [f64; 7] = [0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.95];

/// Floor added to every softplus increment so adjacent quantiles stay
/// distinct even when `softplus(d)` underflows.
const INCREMENT_FLOOR: f64 = 1e-9;

/// Steepness of the sigmoid coverage surrogate.
const COVERAGE_STEEPNESS: f64 = 50.0;

fn check_level(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("quantile level {tau} must lie in (0, 1)")))
    }
}

/// `ρ_τ(u) = u(τ − 1{u<0})` at `u = y − q`.
pub fn pinball_scalar(y: f64, q: f64, tau: f64) -> Result<f64> {
    check_level(tau)?;
    let u = y - q;
    Ok(if u >= 0.0 { u * tau } else { u * (tau - 1.0) })
}

/// Mean pinball loss over matching tensors.
pub fn pinball(y: &Tensor, q: &Tensor, tau: f64) -> Result<f64> {
    check_level(tau)?;
    if y.len() != q.len() || y.is_empty() {
        return Err(Error::dim("pinball", format!("{:?} vs {:?}", y.shape(), q.shape())));
    }
    let sum: f64 =
        y.data().iter().zip(q.data()).map(|(&a, &b)| pinball_scalar(a, b, tau).expect("level checked")).sum();
    Ok(sum / y.len() as f64)
}

/// Pinball loss on the tape: `mean(τ·relu(u) + (1−τ)·relu(−u))`, `u = y − q`.
pub fn pinball_on_tape(tape: &mut Tape, y: Var, q: Var, tau: f64) -> Result<Var> {
    let u = tape.sub(y, q)?;
    let pos = tape.relu(u);
    let nu = tape.neg(u);
    let neg = tape.relu(nu);
    let a = tape.scale(pos, tau);
    let b = tape.scale(neg, 1.0 - tau);
    let s = tape.add(a, b)?;
    Ok(tape.mean(s))
}

/// Prediction intervals for one window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalSet {
    pub point: Tensor,
    pub lower: Tensor,
    pub upper: Tensor,
    /// Miscoverage `α` for conformal bands; `None` for quantile fans.
    pub alpha: Option<f64>,
    /// Quantile levels and the full fan, for quantile calibrators.
    pub levels: Vec<f64>,
    pub fan: Vec<Tensor>,
}

impl IntervalSet {
    pub fn width(&self) -> Tensor {
        self.upper.sub(&self.lower).expect("matching shapes")
    }

    pub fn mean_width(&self) -> f64 {
        self.width().mean()
    }

    /// Nominal coverage of `[lower, upper]`.
    pub fn nominal(&self) -> f64 {
        match self.alpha {
            Some(a) => 1.0 - a,
            None => self.levels.last().copied().unwrap_or(1.0) - self.levels.first().copied().unwrap_or(0.0),
        }
    }
}

/// Shared trunk of both calibrators: `[vec(Ŷ), mean(X), last(X)] → hidden`.
#[derive(Clone, Debug, PartialEq)]
struct Trunk {
    net: Mlp,
}

impl Trunk {
    fn build(params: &mut ParamSet, prefix: &str, shapes: Shapes, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let cond = shapes.output_len() + 2 * shapes.covariates;
        Trunk { net: Mlp::build(params, prefix, &[cond, hidden], false, rng) }
    }

    fn forward(&self, tape: &mut Tape, vars: &[Var], y_hat: Var, x: Var) -> Result<Var> {
        let cond = summary_features(tape, y_hat, x)?;
        let z = self.net.forward(tape, vars, cond)?;
        Ok(tape.tanh(z))
    }
}

fn dense(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, bias: f64) -> Dense {
    let weight = params.push(format!("{name}.weight"), Tensor::zeros(&[fan_in, fan_out]));
    let bias = params.push(format!("{name}.bias"), Tensor::filled(&[1, fan_out], bias));
    Dense { weight, bias }
}

fn apply_dense(tape: &mut Tape, vars: &[Var], d: Dense, h: Var) -> Result<Var> {
    let z = tape.matmul(h, vars[d.weight])?;
    tape.add_row(z, vars[d.bias])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantileConfig {
    pub levels: Vec<f64>,
    /// Offset trust region `ε`.
    pub epsilon: f64,
    /// Floor `ε_s` added to the softplus scale.
    pub scale_floor: f64,
    pub lambda_cal: f64,
    pub lambda_mag: f64,
    pub hidden: usize,
}

impl Default for QuantileConfig {
    fn default() -> Self {
        QuantileConfig {
            levels: DEFAULT_LEVELS.to_vec(),
            epsilon: 0.5,
            scale_floor: 1e-3,
            lambda_cal: 0.1,
            lambda_mag: 1e-4,
            hidden: 32,
        }
    }
}

/// Monotone quantile fan `q_{τ_1} < … < q_{τ_J}` around `Ŷ`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantileCalibrator {
    pub config: QuantileConfig,
    pub shapes: Shapes,
    pub params: ParamSet,
    trunk: Trunk,
    offset: Dense,
    scale: Dense,
    increments: Dense,
}

/// Tape handles for one fan evaluation.
pub struct FanVars {
    pub quantiles: Vec<Var>,
    /// Bounded offset direction `a ∈ [−1, 1]^{H×m}`.
    pub offset: Var,
}

impl QuantileCalibrator {
    pub fn new(config: QuantileConfig, shapes: Shapes, seed: u64) -> Result<Self> {
        if config.levels.is_empty() {
            return Err(Error::Config("quantile calibrator needs at least one level".into()));
        }
        for &t in &config.levels {
            check_level(t)?;
        }
        if config.levels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("quantile levels must be strictly increasing".into()));
        }
        if !(config.epsilon > 0.0) || !(config.scale_floor > 0.0) || config.hidden == 0 {
            return Err(Error::Config("quantile calibrator needs ε > 0, ε_s > 0, hidden ≥ 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let trunk = Trunk::build(&mut params, "quantile.trunk", shapes, config.hidden, &mut rng);
        let hm = shapes.output_len();
        let offset = dense(&mut params, "quantile.offset", config.hidden, hm, 0.0);
        let scale = dense(&mut params, "quantile.scale", config.hidden, hm, 0.0);
        let gaps = config.levels.len() - 1;
        let increments = dense(&mut params, "quantile.increments", config.hidden, gaps.max(1) * hm, 0.0);
        Ok(QuantileCalibrator { config, shapes, params, trunk, offset, scale, increments })
    }

    pub fn levels(&self) -> &[f64] {
        &self.config.levels
    }

    /// Index of the central level, `J / 2` (0-based).
    pub fn anchor_index(&self) -> usize {
        self.config.levels.len() / 2
    }

    pub fn fan_on_tape(&self, tape: &mut Tape, vars: &[Var], x: Var, y_hat: Var) -> Result<FanVars> {
        let [h, m] = self.shapes.output_shape();
        let hm = h * m;
        let feats = self.trunk.forward(tape, vars, y_hat, x)?;
        let a = apply_dense(tape, vars, self.offset, feats)?;
        let a = tape.tanh(a);
        let a = tape.reshape(a, &[h, m])?;
        let s = apply_dense(tape, vars, self.scale, feats)?;
        let s = tape.softplus(s);
        let s = tape.offset(s, self.config.scale_floor);
        let s = tape.reshape(s, &[h, m])?;
        let shift = tape.mul(a, s)?;
        let shift = tape.scale(shift, self.config.epsilon);
        let anchor = tape.add(y_hat, shift)?;

        let j = self.config.levels.len();
        let k = self.anchor_index();
        let mut q: Vec<Option<Var>> = vec![None; j];
        q[k] = Some(anchor);
        if j > 1 {
            let d = apply_dense(tape, vars, self.increments, feats)?;
            let inc = tape.softplus(d);
            let inc = tape.offset(inc, INCREMENT_FLOOR);
            let step = |tape: &mut Tape, g: usize| -> Result<Var> {
                let s = tape.slice_cols(inc, g * hm, hm)?;
                tape.reshape(s, &[h, m])
            };
            for i in k + 1..j {
                let s = step(tape, i - 1)?;
                q[i] = Some(tape.add(q[i - 1].expect("filled upward"), s)?);
            }
            for i in (0..k).rev() {
                let s = step(tape, i)?;
                q[i] = Some(tape.sub(q[i + 1].expect("filled downward"), s)?);
            }
        }
        Ok(FanVars { quantiles: q.into_iter().map(|v| v.expect("every level filled")).collect(), offset: a })
    }

    /// Objective for a batch: mean pinball over levels and samples, plus
    /// `λ_cal·Σ_j (mean σ_k(y − q_j) − (1 − τ_j))²` and `λ_mag·mean(a²)`.
    pub fn batch_loss_on_tape(&self, tape: &mut Tape, vars: &[Var], batch: &[(Var, Var, Var)]) -> Result<Var> {
        let levels = self.config.levels.clone();
        let n = batch.len() as f64;
        let mut pin = Vec::new();
        let mut cover: Vec<Vec<Var>> = vec![Vec::new(); levels.len()];
        let mut mags = Vec::new();
        for &(x, y_hat, y) in batch {
            let fan = self.fan_on_tape(tape, vars, x, y_hat)?;
            for (j, (&q, &tau)) in fan.quantiles.iter().zip(&levels).enumerate() {
                pin.push(pinball_on_tape(tape, y, q, tau)?);
                if self.config.lambda_cal != 0.0 {
                    let u = tape.sub(y, q)?;
                    let u = tape.scale(u, COVERAGE_STEEPNESS);
                    let c = tape.sigmoid(u);
                    cover[j].push(tape.mean(c));
                }
            }
            if self.config.lambda_mag != 0.0 {
                let a2 = tape.square(fan.offset);
                mags.push(tape.mean(a2));
            }
        }
        let mut total = sum_vars(tape, &pin)?;
        total = tape.scale(total, 1.0 / (n * levels.len() as f64));
        if self.config.lambda_cal != 0.0 {
            let mut pen = Vec::new();
            for (j, cs) in cover.iter().enumerate() {
                let s = sum_vars(tape, cs)?;
                let mean = tape.scale(s, 1.0 / n);
                let dev = tape.offset(mean, -(1.0 - levels[j]));
                pen.push(tape.square(dev));
            }
            let p = sum_vars(tape, &pen)?;
            let p = tape.scale(p, self.config.lambda_cal);
            total = tape.add(total, p)?;
        }
        if self.config.lambda_mag != 0.0 {
            let s = sum_vars(tape, &mags)?;
            let s = tape.scale(s, self.config.lambda_mag / n);
            total = tape.add(total, s)?;
        }
        Ok(total)
    }

    /// Evaluates the fan for one window.
    pub fn fan(&self, x: &Tensor, y_hat: &Tensor) -> Result<Vec<Tensor>> {
        self.shapes.check_input(x)?;
        let mut tape = Tape::new();
        let vars = self.params.bind_frozen(&mut tape);
        let (xv, yv) = (tape.constant(x), tape.constant(y_hat));
        let fan = self.fan_on_tape(&mut tape, &vars, xv, yv)?;
        Ok(fan.quantiles.iter().map(|&q| tape.value(q).clone()).collect())
    }
}

pub(crate) fn sum_vars(tape: &mut Tape, vs: &[Var]) -> Result<Var> {
    let Some((&first, rest)) = vs.split_first() else {
        return Ok(tape.scalar(0.0));
    };
    let mut acc = first;
    for &v in rest {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

/// The full fan as an [`IntervalSet`] whose band is the outermost pair.
pub fn quantile_fan(qc: &QuantileCalibrator, x: &Tensor, y_hat: &Tensor) -> Result<IntervalSet> {
    let fan = qc.fan(x, y_hat)?;
    Ok(IntervalSet {
        point: y_hat.clone(),
        lower: fan.first().expect("non-empty fan").clone(),
        upper: fan.last().expect("non-empty fan").clone(),
        alpha: None,
        levels: qc.config.levels.clone(),
        fan,
    })
}

/// How per-window scores pool over the `H×m` residual.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    /// `max_h ‖Y_h − Ŷ_h‖ / w_h`; bands `Ŷ_h ± κ·w_h`.
    PerHorizon,
    /// `‖Y − Ŷ‖ / mean_h w_h`; every coordinate gets radius `κ·mean_h w_h`.
    Joint,
}

/// Training objective of the scale net.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleObjective {
    /// `mean_h(ρ_h/w_h + ln w_h) + λ_w·mean_h (w_h − 1)²`; minimized at `w = E[ρ | X]`.
    LogScale,
    /// `mean_h ρ_h/w_h + λ_w·mean_h (w_h − 1)²`.
    Ratio,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConformalConfig {
    pub alpha: f64,
    pub lambda_w: f64,
    /// Floor `ε_w` added to the softplus scale.
    pub scale_floor: f64,
    pub hidden: usize,
    pub residual_mode: ResidualMode,
    pub objective: ScaleObjective,
}

impl Default for ConformalConfig {
    fn default() -> Self {
        ConformalConfig {
            alpha: 0.1,
            lambda_w: 0.1,
            scale_floor: 1e-3,
            hidden: 32,
            residual_mode: ResidualMode::PerHorizon,
            objective: ScaleObjective::LogScale,
        }
    }
}

/// Calibration outcome, written as metadata JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub alpha: f64,
    pub n_cal: usize,
    pub kappa: f64,
    /// 1-based order-statistic rank of `kappa`.
    pub rank: usize,
    pub rank_convention: String,
    pub residual_mode: ResidualMode,
    pub seed: u64,
}

/// Learned-scale split conformal calibrator.
#[derive(Clone, Debug, PartialEq)]
pub struct ConformalCalibrator {
    pub config: ConformalConfig,
    pub shapes: Shapes,
    pub params: ParamSet,
    /// Sorted calibration scores, set by [`conformal_calibrate`].
    pub scores: Vec<f64>,
    pub calibration: Option<Calibration>,
    trunk: Trunk,
    head: Dense,
}

/// `softplus⁻¹(1)`: the head bias that starts every scale at about 1.
fn unit_scale_bias() -> f64 {
    (std::f64::consts::E - 1.0).ln()
}

impl ConformalCalibrator {
    pub fn new(config: ConformalConfig, shapes: Shapes, seed: u64) -> Result<Self> {
        if !(config.alpha > 0.0 && config.alpha < 1.0) {
            return Err(Error::Config(format!("alpha {} must lie in (0, 1)", config.alpha)));
        }
        if !(config.lambda_w >= 0.0) || !(config.scale_floor > 0.0) || config.hidden == 0 {
            return Err(Error::Config("conformal calibrator needs λ_w ≥ 0, ε_w > 0, hidden ≥ 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let trunk = Trunk::build(&mut params, "conformal.trunk", shapes, config.hidden, &mut rng);
        let head = dense(&mut params, "conformal.scale", config.hidden, shapes.horizon, unit_scale_bias());
        Ok(ConformalCalibrator { config, shapes, params, scores: Vec::new(), calibration: None, trunk, head })
    }

    /// `w_θ(X, Ŷ) ∈ R^{1×H}`, strictly positive.
    pub fn scale_on_tape(&self, tape: &mut Tape, vars: &[Var], x: Var, y_hat: Var) -> Result<Var> {
        let feats = self.trunk.forward(tape, vars, y_hat, x)?;
        let z = apply_dense(tape, vars, self.head, feats)?;
        let w = tape.softplus(z);
        Ok(tape.offset(w, self.config.scale_floor))
    }

    /// Per-horizon residual norms `ρ_h = ‖Y_h − Ŷ_h‖₂` as a `1×H` var.
    pub fn residual_on_tape(tape: &mut Tape, y: Var, y_hat: Var) -> Result<Var> {
        let r = tape.sub(y, y_hat)?;
        let r2 = tape.square(r);
        let per_h = tape.sum_cols(r2);
        let per_h = tape.sqrt(per_h);
        Ok(tape.transpose(per_h))
    }

    /// Scale-training objective for one window; `rho` is a constant `1×H`.
    pub fn sample_loss_on_tape(&self, tape: &mut Tape, vars: &[Var], x: Var, y_hat: Var, rho: &Tensor) -> Result<Var> {
        let w = self.scale_on_tape(tape, vars, x, y_hat)?;
        let r = tape.constant(rho);
        let ratio = tape.div(r, w)?;
        let data = match self.config.objective {
            ScaleObjective::Ratio => ratio,
            ScaleObjective::LogScale => {
                let lw = tape.ln(w);
                tape.add(ratio, lw)?
            }
        };
        let data = tape.mean(data);
        if self.config.lambda_w == 0.0 {
            return Ok(data);
        }
        let dev = tape.offset(w, -1.0);
        let dev = tape.square(dev);
        let reg = tape.mean(dev);
        let reg = tape.scale(reg, self.config.lambda_w);
        tape.add(data, reg)
    }

    pub fn scale(&self, x: &Tensor, y_hat: &Tensor) -> Result<Vec<f64>> {
        self.shapes.check_input(x)?;
        let mut tape = Tape::new();
        let vars = self.params.bind_frozen(&mut tape);
        let (xv, yv) = (tape.constant(x), tape.constant(y_hat));
        let w = self.scale_on_tape(&mut tape, &vars, xv, yv)?;
        Ok(tape.value(w).data().to_vec())
    }

    /// Nonconformity score of one window under the configured residual mode.
    pub fn score(&self, x: &Tensor, y_hat: &Tensor, y: &Tensor) -> Result<f64> {
        let w = self.scale(x, y_hat)?;
        nonconformity(y, y_hat, &w, self.config.residual_mode)
    }
}

/// Per-horizon residual norms of `y − ŷ` (rows are horizons).
pub fn residual_norms(y: &Tensor, y_hat: &Tensor) -> Result<Vec<f64>> {
    if y.shape() != y_hat.shape() {
        return Err(Error::dim("residual_norms", format!("{:?} vs {:?}", y.shape(), y_hat.shape())));
    }
    Ok((0..y.rows())
        .map(|h| y.row(h).iter().zip(y_hat.row(h)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
        .collect())
}

/// Normalized score from residuals and per-horizon scales.
pub fn nonconformity(y: &Tensor, y_hat: &Tensor, w: &[f64], mode: ResidualMode) -> Result<f64> {
    let rho = residual_norms(y, y_hat)?;
    if w.len() != rho.len() {
        return Err(Error::dim("nonconformity", format!("{} scales for H={}", w.len(), rho.len())));
    }
    Ok(match mode {
        ResidualMode::PerHorizon => rho.iter().zip(w).map(|(r, w)| r / w).fold(0.0, f64::max),
        ResidualMode::Joint => {
            let total = rho.iter().map(|r| r * r).sum::<f64>().sqrt();
            total / (w.iter().sum::<f64>() / w.len() as f64)
        }
    })
}

/// 1-based rank `⌈(1−α)(n+1)⌉` of the conformal quantile.
pub fn conformal_rank(alpha: f64, n: usize) -> Result<usize> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha {alpha} must lie in (0, 1)")));
    }
    // the tolerance keeps exact products such as 0.75·4 = 3 from rounding up
    let rank = ((1.0 - alpha) * (n as f64 + 1.0) - 1e-9).ceil().max(1.0) as usize;
    if rank > n {
        let min_n = ((1.0 / alpha) - 1e-9).ceil() as usize - 1;
        return Err(Error::CoverageInfeasible { alpha, n, min_n });
    }
    Ok(rank)
}

/// `κ_α` from unsorted scores; returns `(κ, rank)`.
pub fn conformal_quantile(scores: &[f64], alpha: f64) -> Result<(f64, usize)> {
    let rank = conformal_rank(alpha, scores.len())?;
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok((sorted[rank - 1], rank))
}

/// Scores the calibration windows and stores `κ_α`.
pub fn conformal_calibrate(
    cc: &mut ConformalCalibrator,
    f: &Forecaster,
    windows: &[Window],
    seed: u64,
) -> Result<Calibration> {
    let mut scores = windows.iter().map(|w| cc.score(&w.x, &f.predict(&w.x)?, &w.y)).collect::<Result<Vec<f64>>>()?;
    let (kappa, rank) = conformal_quantile(&scores, cc.config.alpha)?;
    scores.sort_by(f64::total_cmp);
    let cal = Calibration {
        alpha: cc.config.alpha,
        n_cal: scores.len(),
        kappa,
        rank,
        rank_convention: "ceil((1-alpha)(n+1))".into(),
        residual_mode: cc.config.residual_mode,
        seed,
    };
    cc.scores = scores;
    cc.calibration = Some(cal.clone());
    Ok(cal)
}

/// Bands `Ŷ ± κ_α·w` for one window.
pub fn conformal_interval(cc: &ConformalCalibrator, x: &Tensor, y_hat: &Tensor) -> Result<IntervalSet> {
    let cal =
        cc.calibration.as_ref().ok_or_else(|| Error::State("conformal calibrator has not been calibrated".into()))?;
    let w = cc.scale(x, y_hat)?;
    let m = y_hat.cols();
    let radius: Vec<f64> = match cc.config.residual_mode {
        ResidualMode::PerHorizon => w.iter().flat_map(|&wh| std::iter::repeat_n(cal.kappa * wh, m)).collect(),
        ResidualMode::Joint => {
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            vec![cal.kappa * mean; y_hat.len()]
        }
    };
    let lower = Tensor::new(y_hat.data().iter().zip(&radius).map(|(p, r)| p - r).collect(), y_hat.shape().to_vec())?;
    let upper = Tensor::new(y_hat.data().iter().zip(&radius).map(|(p, r)| p + r).collect(), y_hat.shape().to_vec())?;
    Ok(IntervalSet { point: y_hat.clone(), lower, upper, alpha: Some(cal.alpha), levels: Vec::new(), fan: Vec::new() })
}

/// Fraction of windows whose learned scale sits within 1% of its floor.
pub fn scale_collapse_fraction(cc: &ConformalCalibrator, f: &Forecaster, windows: &[Window]) -> Result<f64> {
    if windows.is_empty() {
        return Ok(0.0);
    }
    let floor = cc.config.scale_floor * 1.01;
    let mut collapsed = 0;
    for w in windows {
        let s = cc.scale(&w.x, &f.predict(&w.x)?)?;
        if s.iter().any(|&v| v <= floor) {
            collapsed += 1;
        }
    }
    let frac = collapsed as f64 / windows.len() as f64;
    if frac > 0.5 {
        log::warn!("learned scale collapsed to its floor on {:.0}% of windows; raise lambda_w", 100.0 * frac);
    }
    Ok(frac)
}

/// Interval CSV: `window_id,horizon,target,point,lower,upper,level_or_alpha`.
///
/// Conformal bands write one row per entry with `α`; quantile fans write one
/// row per central pair `(τ_j, τ_{J−1−j})` with its nominal coverage.
pub fn write_intervals(path: &Path, sets: &[IntervalSet]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let err = |e: csv::Error| Error::Data(e.to_string());
    w.write_record(["window_id", "horizon", "target", "point", "lower", "upper", "level_or_alpha"]).map_err(err)?;
    for (id, s) in sets.iter().enumerate() {
        let (h, m) = (s.point.rows(), s.point.cols());
        let pairs: Vec<(Tensor, Tensor, f64)> = match s.alpha {
            Some(a) => vec![(s.lower.clone(), s.upper.clone(), a)],
            None => {
                let j = s.levels.len();
                (0..j / 2)
                    .map(|i| (s.fan[i].clone(), s.fan[j - 1 - i].clone(), s.levels[j - 1 - i] - s.levels[i]))
                    .collect()
            }
        };
        for (lo, hi, level) in pairs {
            for hh in 0..h {
                for k in 0..m {
                    w.write_record([
                        id.to_string(),
                        hh.to_string(),
                        k.to_string(),
                        s.point.get(hh, k).to_string(),
                        lo.get(hh, k).to_string(),
                        hi.get(hh, k).to_string(),
                        level.to_string(),
                    ])
                    .map_err(err)?;
                }
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes calibration metadata as pretty JSON.
pub fn write_calibration(path: &Path, cal: &Calibration) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(&mut f, cal)?;
    f.write_all(b"\n").map_err(|e| Error::io(path, e))
}

/// Gap between adjacent quantiles for a raw increment `d`.
pub fn increment(d: f64) -> f64 {
    softplus(d) + INCREMENT_FLOOR
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn pinball_examples() {
        assert_eq!(pinball_scalar(1.0, 0.0, 0.5).unwrap(), 0.5);
        assert_eq!(pinball_scalar(-1.0, 0.0, 0.5).unwrap(), 0.5);
        assert!((pinball_scalar(-1.0, 0.0, 0.9).unwrap() - 0.1).abs() < 1e-15);
        for bad in [0.0, 1.0, -0.2, f64::NAN] {
            assert!(matches!(pinball_scalar(0.0, 0.0, bad), Err(Error::Config(_))));
        }
    }

    #[test]
    fn pinball_tape_matches_scalar() {
        let y = Tensor::new(vec![1.0, -2.0, 0.5], vec![3, 1]).unwrap();
        let q = Tensor::new(vec![0.0, 0.0, 0.5], vec![3, 1]).unwrap();
        let mut tape = Tape::new();
        let (yv, qv) = (tape.constant(&y), tape.constant(&q));
        let l = pinball_on_tape(&mut tape, yv, qv, 0.3).unwrap();
        assert!((tape.value(l).item() - pinball(&y, &q, 0.3).unwrap()).abs() < 1e-15);
    }

    fn shapes() -> Shapes {
        Shapes::new(4, 2, 3, 1)
    }

    #[test]
    fn init_fan_arithmetic() {
        let qc = QuantileCalibrator::new(QuantileConfig::default(), shapes(), 0).unwrap();
        assert_eq!(qc.anchor_index(), 3);
        let x = Tensor::filled(&[4, 2], 0.3);
        let y_hat = Tensor::new(vec![1.0, 2.0, 3.0], vec![3, 1]).unwrap();
        let fan = qc.fan(&x, &y_hat).unwrap();
        assert_eq!(fan[3], y_hat);
        let ln2 = std::f64::consts::LN_2;
        for (a, b) in fan[4].data().iter().zip(y_hat.data()) {
            assert!((a - b - ln2).abs() < 1e-8);
        }

        let cfg = QuantileConfig { levels: vec![0.25, 0.5, 0.75], ..QuantileConfig::default() };
        let qc = QuantileCalibrator::new(cfg, Shapes::new(4, 2, 1, 1), 0).unwrap();
        let fan = qc.fan(&x, &Tensor::scalar(0.0)).unwrap();
        let vals: Vec<f64> = fan.iter().map(Tensor::item).collect();
        assert!((vals[0] + ln2).abs() < 1e-8 && vals[1] == 0.0 && (vals[2] - ln2).abs() < 1e-8);
    }

    #[test]
    fn fan_monotone_under_extreme_params() {
        let mut qc = QuantileCalibrator::new(QuantileConfig::default(), shapes(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for t in qc.params.tensors_mut() {
            for v in t.data_mut() {
                *v = rng.random_range(-200.0..200.0);
            }
        }
        let x = Tensor::new((0..8).map(|_| rng.random_range(-5.0..5.0)).collect(), vec![4, 2]).unwrap();
        let fan = qc.fan(&x, &Tensor::filled(&[3, 1], 0.7)).unwrap();
        for pair in fan.windows(2) {
            assert!(pair[0].data().iter().zip(pair[1].data()).all(|(a, b)| a < b));
        }
    }

    #[test]
    fn rank_convention_examples() {
        assert_eq!(conformal_quantile(&[1.0, 2.0, 3.0, 4.0], 0.25).unwrap(), (4.0, 4));
        assert_eq!(conformal_quantile(&[3.0, 1.0, 2.0], 0.5).unwrap(), (2.0, 2));
        assert_eq!(conformal_quantile(&[2.5; 30], 0.1).unwrap().0, 2.5);
        match conformal_quantile(&[1.0; 5], 0.1) {
            Err(Error::CoverageInfeasible { n, min_n, .. }) => assert_eq!((n, min_n), (5, 9)),
            other => panic!("{other:?}"),
        }
        assert!(conformal_quantile(&[1.0; 9], 0.1).is_ok());
    }

    #[test]
    fn uncalibrated_interval_is_state_error() {
        let cc = ConformalCalibrator::new(ConformalConfig::default(), shapes(), 0).unwrap();
        let r = conformal_interval(&cc, &Tensor::zeros(&[4, 2]), &Tensor::zeros(&[3, 1]));
        assert!(matches!(r, Err(Error::State(_))));
    }

    #[test]
    fn init_scale_is_about_one() {
        let cc = ConformalCalibrator::new(ConformalConfig::default(), shapes(), 0).unwrap();
        let w = cc.scale(&Tensor::filled(&[4, 2], 2.0), &Tensor::filled(&[3, 1], -1.0)).unwrap();
        assert!(w.iter().all(|&v| (v - 1.001).abs() < 1e-12), "{w:?}");
    }

    #[test]
    fn band_arithmetic() {
        let mut cc = ConformalCalibrator::new(ConformalConfig::default(), Shapes::new(4, 2, 1, 1), 0).unwrap();
        cc.config.scale_floor = 0.0;
        cc.calibration = Some(Calibration {
            alpha: 0.1,
            n_cal: 10,
            kappa: 2.0,
            rank: 10,
            rank_convention: String::new(),
            residual_mode: ResidualMode::PerHorizon,
            seed: 0,
        });
        let s = conformal_interval(&cc, &Tensor::zeros(&[4, 2]), &Tensor::scalar(5.0)).unwrap();
        assert!((s.lower.item() - 3.0).abs() < 1e-12 && (s.upper.item() - 7.0).abs() < 1e-12);
        cc.calibration.as_mut().unwrap().kappa = 0.0;
        let s = conformal_interval(&cc, &Tensor::zeros(&[4, 2]), &Tensor::scalar(5.0)).unwrap();
        assert_eq!((s.lower.item(), s.upper.item()), (5.0, 5.0));
    }

    #[test]
    fn scores_are_scale_equivariant() {
        let y = Tensor::new(vec![1.0, -2.0, 0.5, 3.0], vec![2, 2]).unwrap();
        let p = Tensor::zeros(&[2, 2]);
        let w = [0.7, 1.9];
        for mode in [ResidualMode::PerHorizon, ResidualMode::Joint] {
            let s = nonconformity(&y, &p, &w, mode).unwrap();
            let c = 3.7;
            let s2 = nonconformity(&y.map(|v| v * c), &p, &[w[0] * c, w[1] * c], mode).unwrap();
            assert!((s - s2).abs() < 1e-12);
        }
    }
}
