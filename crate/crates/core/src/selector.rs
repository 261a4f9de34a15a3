//! Sparse feature mask `M ∈ (0,1)^{L×d}` applied to the context as `X ⊙ M`.
//!
//! Logits come from one small MLP per covariate (its `L`-vector plus the
//! column means of `X`). Training samples a relaxed Bernoulli mask
//! `σ((ℓ + G)/τ)` with `G` logistic (default) or Gumbel noise and anneals `τ`
//! geometrically.

use std::io::Write;
use std::path::Path;

use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mlp, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Noise added to the logits before the tempered sigmoid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseLaw {
    /// `G₁ − G₂` of two standard Gumbels, i.e. standard logistic.
    Logistic,
    /// A single standard Gumbel `−ln(−ln U)`.
    Gumbel,
}

impl NoiseLaw {
    pub fn from_uniform(self, u: f64) -> f64 {
        match self {
            NoiseLaw::Logistic => u.ln() - (-u).ln_1p(),
            NoiseLaw::Gumbel => -(-u.ln()).ln(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hardening {
    Soft,
    Threshold,
    StraightThrough,
}

/// Pre-sigmoid clamp keeping soft entries strictly inside `(0, 1)`.
const LOGIT_CLAMP: f64 = 30.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectorConfig {
    pub hidden: usize,
    pub tau_start: f64,
    pub tau_end: f64,
    pub noise: NoiseLaw,
    pub hardening: Hardening,
    /// Initial output bias of every logit head.
    pub init_logit: f64,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        SelectorConfig {
            hidden: 16,
            tau_start: 5.0,
            tau_end: 0.1,
            noise: NoiseLaw::Logistic,
            hardening: Hardening::Soft,
            init_logit: 1.0,
        }
    }
}

/// Temperature after `epoch` of `epochs` under geometric annealing.
pub fn anneal(cfg: &SelectorConfig, epoch: usize, epochs: usize) -> f64 {
    if epochs <= 1 {
        return cfg.tau_end;
    }
    let frac = (epoch.min(epochs - 1)) as f64 / (epochs - 1) as f64;
    cfg.tau_start * (cfg.tau_end / cfg.tau_start).powf(frac)
}

/// Per-covariate logit networks.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskNet {
    pub config: SelectorConfig,
    pub lookback: usize,
    pub covariates: usize,
    pub params: ParamSet,
    /// Current temperature.
    pub tau: f64,
    nets: Vec<Mlp>,
}

/// One mask draw.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSample {
    pub soft: Tensor,
    pub hard: Tensor,
    pub keep_rate: f64,
    pub seed: Option<u64>,
}

impl MaskNet {
    pub fn new(config: SelectorConfig, lookback: usize, covariates: usize, seed: u64) -> Result<Self> {
        if !(config.tau_start > 0.0 && config.tau_end > 0.0) || config.hidden == 0 {
            return Err(Error::Config("selector needs positive temperatures and hidden width".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let nets = (0..covariates)
            .map(|j| {
                let net = Mlp::build(
                    &mut params,
                    &format!("mask.{j}"),
                    &[lookback + covariates, config.hidden, lookback],
                    false,
                    &mut rng,
                );
                let head = net.head();
                params.tensors_mut()[head.bias].data_mut().fill(config.init_logit);
                net
            })
            .collect();
        Ok(MaskNet { tau: config.tau_start, config, lookback, covariates, params, nets })
    }

    pub fn nets(&self) -> &[Mlp] {
        &self.nets
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.shape() != [self.lookback, self.covariates] {
            return Err(Error::dim("mask", format!("X {:?} vs [{}, {}]", x.shape(), self.lookback, self.covariates)));
        }
        Ok(())
    }

    /// Logit field `ℓ(X) ∈ R^{L×d}`.
    pub fn logits_on_tape(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let l = self.lookback;
        let sums = tape.sum_rows(x);
        let means = tape.scale(sums, 1.0 / l as f64);
        let xt = tape.transpose(x);
        let mut rows = Vec::with_capacity(self.covariates);
        for (j, net) in self.nets.iter().enumerate() {
            let series = tape.slice_rows(xt, j, 1)?;
            let input = tape.concat_cols(&[series, means])?;
            rows.push(net.forward(tape, vars, input)?);
        }
        let stacked = tape.concat_rows(&rows)?;
        Ok(tape.transpose(stacked))
    }

    /// Soft mask `σ(clamp((ℓ + G)/τ))`; `noise = None` is the noise-free mask.
    pub fn soft_on_tape(&self, tape: &mut Tape, vars: &[Var], x: Var, noise: Option<&Tensor>, tau: f64) -> Result<Var> {
        let mut z = self.logits_on_tape(tape, vars, x)?;
        if let Some(g) = noise {
            let g = tape.constant(g);
            z = tape.add(z, g)?;
        }
        let z = tape.scale(z, 1.0 / tau);
        let z = tape.clamp(z, -LOGIT_CLAMP, LOGIT_CLAMP);
        Ok(tape.sigmoid(z))
    }

    /// Draws `G` of shape `L×d` from `rng`.
    pub fn draw_noise(&self, rng: &mut impl Rng) -> Tensor {
        let law = self.config.noise;
        let data = (0..self.lookback * self.covariates).map(|_| law.from_uniform(rng.sample(Open01))).collect();
        Tensor::new(data, vec![self.lookback, self.covariates]).expect("finite noise")
    }

    /// Training-mode mask for one window, seeded per window.
    pub fn sample(&self, x: &Tensor, seed: u64) -> Result<MaskSample> {
        self.check(x)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = self.draw_noise(&mut rng);
        let mut s = self.eval_mask(x, Some(&g), self.tau)?;
        s.seed = Some(seed);
        Ok(s)
    }

    /// Deterministic mask `σ(ℓ/τ)` at the current temperature.
    pub fn infer(&self, x: &Tensor) -> Result<MaskSample> {
        self.check(x)?;
        self.eval_mask(x, None, self.tau)
    }

    fn eval_mask(&self, x: &Tensor, noise: Option<&Tensor>, tau: f64) -> Result<MaskSample> {
        let mut tape = Tape::new();
        let vars = self.params.bind_frozen(&mut tape);
        let xv = tape.constant(x);
        let m = self.soft_on_tape(&mut tape, &vars, xv, noise, tau)?;
        let soft = tape.value(m).clone();
        let hard = soft.map(|v| if v > 0.5 { 1.0 } else { 0.0 });
        Ok(MaskSample { keep_rate: soft.mean(), soft, hard, seed: None })
    }

    /// The mask actually applied at inference under the configured hardening.
    pub fn applied_mask(&self, x: &Tensor) -> Result<Tensor> {
        let s = self.infer(x)?;
        Ok(match self.config.hardening {
            Hardening::Soft => s.soft,
            Hardening::Threshold | Hardening::StraightThrough => s.hard,
        })
    }
}

/// `1{M > 0.5}` in the forward pass; straight-through mode passes the
/// gradient unchanged to `M` (and so on to the sigmoid's pre-activation).
/// Threshold mode blocks the gradient.
pub fn harden(tape: &mut Tape, soft: Var, mode: Hardening) -> Result<Var> {
    match mode {
        Hardening::Soft => Ok(soft),
        Hardening::StraightThrough => Ok(tape.straight_through(soft)),
        Hardening::Threshold => {
            let hard = tape.value(soft).map(|v| if v > 0.5 { 1.0 } else { 0.0 });
            Ok(tape.constant(&hard))
        }
    }
}

/// Prediction term of the selector objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PredLoss {
    Mse,
    Mae,
    Pinball { tau: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectorLossWeights {
    pub l1: f64,
    pub entropy: f64,
    pub tv: f64,
    pub budget: f64,
    pub group: f64,
    /// Keep-rate target `κ`; `None` disables the budget hinge.
    pub kappa: Option<f64>,
    /// Horizon weights `w_h`; empty means all ones.
    pub horizon_weights: Vec<f64>,
}

impl Default for SelectorLossWeights {
    fn default() -> Self {
        SelectorLossWeights {
            l1: 1e-3,
            entropy: 1e-3,
            tv: 1e-4,
            budget: 0.0,
            group: 0.0,
            kappa: None,
            horizon_weights: Vec::new(),
        }
    }
}

impl SelectorLossWeights {
    /// Defaults with a keep-rate budget `κ` and `λ_bud = 1`.
    pub fn with_budget(kappa: f64) -> Self {
        SelectorLossWeights { budget: 1.0, kappa: Some(kappa), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ls = [self.l1, self.entropy, self.tv, self.budget, self.group];
        if ls.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::Config("selector loss weights must be non-negative".into()));
        }
        if let Some(k) = self.kappa {
            if !(k > 0.0 && k <= 1.0) {
                return Err(Error::Config(format!("budget kappa {k} must lie in (0, 1]")));
            }
        }
        if self.horizon_weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("horizon weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-term values of the selector objective (before λ weighting).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub pred: f64,
    pub sparsity: f64,
    pub entropy: f64,
    pub tv: f64,
    pub budget: f64,
    pub group: f64,
}

const ENTROPY_EPS: f64 = 1e-8;

/// Horizon-weighted prediction loss `mean_{h,k} w_h·ℓ(pred − target)`.
pub fn prediction_loss(
    tape: &mut Tape,
    pred: Var,
    target: Var,
    kind: PredLoss,
    horizon_weights: &[f64],
) -> Result<Var> {
    let diff = tape.sub(pred, target)?;
    let per = match kind {
        PredLoss::Mse => tape.square(diff),
        PredLoss::Mae => tape.abs(diff),
        PredLoss::Pinball { tau } => {
            // u = target − pred = −diff
            let pos = tape.relu(diff);
            let neg = tape.neg(diff);
            let neg = tape.relu(neg);
            let a = tape.scale(neg, tau);
            let b = tape.scale(pos, 1.0 - tau);
            tape.add(a, b)?
        }
    };
    if horizon_weights.is_empty() {
        return Ok(tape.mean(per));
    }
    let (h, m) = (tape.value(per).rows(), tape.value(per).cols());
    if horizon_weights.len() != h {
        return Err(Error::dim("prediction_loss", format!("{} horizon weights for H={h}", horizon_weights.len())));
    }
    let w: Vec<f64> = horizon_weights.iter().flat_map(|&w| std::iter::repeat_n(w, m)).collect();
    let w = tape.constant(&Tensor::new(w, vec![h, m])?);
    let weighted = tape.mul(per, w)?;
    Ok(tape.mean(weighted))
}

/// Records the full objective and returns it with the mask-term vars.
pub fn selector_loss_on_tape(
    tape: &mut Tape,
    mask: Var,
    pred: Var,
    target: Var,
    kind: PredLoss,
    w: &SelectorLossWeights,
) -> Result<(Var, [Var; 6])> {
    let l_pred = prediction_loss(tape, pred, target, kind, &w.horizon_weights)?;
    let sparsity = tape.mean(mask);

    let plus = tape.offset(mask, ENTROPY_EPS);
    let ln_m = tape.ln(plus);
    let a = tape.mul(mask, ln_m)?;
    let one_minus = tape.neg(mask);
    let one_minus = tape.offset(one_minus, 1.0);
    let plus = tape.offset(one_minus, ENTROPY_EPS);
    let ln_1m = tape.ln(plus);
    let b = tape.mul(one_minus, ln_1m)?;
    let s = tape.add(a, b)?;
    let ent = tape.mean(s);
    let entropy = tape.neg(ent);

    let l = tape.value(mask).rows();
    let tv = if l > 1 {
        let later = tape.slice_rows(mask, 1, l - 1)?;
        let earlier = tape.slice_rows(mask, 0, l - 1)?;
        let d = tape.sub(later, earlier)?;
        let d = tape.abs(d);
        tape.mean(d)
    } else {
        tape.scalar(0.0)
    };

    let budget = match w.kappa {
        Some(k) => {
            let over = tape.offset(sparsity, -k);
            tape.relu(over)
        }
        None => tape.scalar(0.0),
    };

    let sq = tape.square(mask);
    let col = tape.sum_rows(sq);
    let col = tape.offset(col, ENTROPY_EPS);
    let col = tape.sqrt(col);
    let group = tape.mean(col);

    let terms = [l_pred, sparsity, entropy, tv, budget, group];
    let lambdas = [1.0, w.l1, w.entropy, w.tv, w.budget, w.group];
    let mut total = l_pred;
    for (&t, &lam) in terms.iter().zip(&lambdas).skip(1) {
        if lam != 0.0 {
            let scaled = tape.scale(t, lam);
            total = tape.add(total, scaled)?;
        }
    }
    Ok((total, terms))
}

/// Evaluates the objective without recording gradients.
pub fn selector_loss(
    mask: &Tensor,
    pred: &Tensor,
    target: &Tensor,
    kind: PredLoss,
    w: &SelectorLossWeights,
) -> Result<LossBreakdown> {
    w.validate()?;
    let mut tape = Tape::new();
    let (m, p, t) = (tape.constant(mask), tape.constant(pred), tape.constant(target));
    let (total, terms) = selector_loss_on_tape(&mut tape, m, p, t, kind, w)?;
    let v = |x: Var| tape.value(x).item();
    Ok(LossBreakdown {
        total: v(total),
        pred: v(terms[0]),
        sparsity: v(terms[1]),
        entropy: v(terms[2]),
        tv: v(terms[3]),
        budget: v(terms[4]),
        group: v(terms[5]),
    })
}

/// Importance of one context entry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportance {
    /// Row within the context window, `0` = oldest.
    pub time_offset: usize,
    pub covariate: usize,
    pub importance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRanking {
    /// Sorted by importance, descending.
    pub entries: Vec<FeatureImportance>,
    /// Mean importance per covariate.
    pub column_importance: Vec<f64>,
    /// Fraction of entries with importance above 0.5.
    pub mask_ratio: f64,
    /// Set when every importance sits within 0.05 of 0.5, as for an
    /// untrained net.
    pub untrained_warning: bool,
}

impl FeatureRanking {
    /// Covariates ordered by column importance, descending.
    pub fn columns_by_importance(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.column_importance.len()).collect();
        idx.sort_by(|&a, &b| self.column_importance[b].total_cmp(&self.column_importance[a]).then(a.cmp(&b)));
        idx
    }
}

/// Mean noise-free soft mask over `windows`, ranked.
pub fn rank_features<'a>(net: &MaskNet, contexts: impl IntoIterator<Item = &'a Tensor>) -> Result<FeatureRanking> {
    let (l, d) = (net.lookback, net.covariates);
    let mut acc = vec![0.0; l * d];
    let mut n = 0usize;
    for x in contexts {
        let s = net.infer(x)?;
        for (a, v) in acc.iter_mut().zip(s.soft.data()) {
            *a += v;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Data("rank_features needs at least one window".into()));
    }
    for a in &mut acc {
        *a /= n as f64;
    }
    let column_importance = (0..d).map(|j| (0..l).map(|t| acc[t * d + j]).sum::<f64>() / l as f64).collect();
    let mut entries: Vec<FeatureImportance> = (0..l)
        .flat_map(|t| (0..d).map(move |j| (t, j)))
        .map(|(t, j)| FeatureImportance { time_offset: t, covariate: j, importance: acc[t * d + j] })
        .collect();
    entries.sort_by(|a, b| {
        b.importance
            .total_cmp(&a.importance)
            .then(a.time_offset.cmp(&b.time_offset))
            .then(a.covariate.cmp(&b.covariate))
    });
    let mask_ratio = acc.iter().filter(|&&v| v > 0.5).count() as f64 / acc.len() as f64;
    let untrained_warning = acc.iter().all(|v| (v - 0.5).abs() < 0.05);
    if untrained_warning {
        log::warn!("selector importances are all near 0.5; the mask looks untrained");
    }
    Ok(FeatureRanking { entries, column_importance, mask_ratio, untrained_warning })
}

/// Writes the feature report: a `# mask_ratio=…,kappa=…` line, then
/// `covariate,time_offset,importance,selected` rows.
pub fn write_feature_report(path: &Path, ranking: &FeatureRanking, names: &[String], kappa: Option<f64>) -> Result<()> {
    let mut out = Vec::new();
    let kappa = kappa.map_or_else(|| "none".to_string(), |k| k.to_string());
    writeln!(out, "# mask_ratio={},kappa={kappa}", ranking.mask_ratio).expect("vec write");
    {
        let mut w = csv::Writer::from_writer(&mut out);
        let csv_err = |e: csv::Error| Error::Data(e.to_string());
        w.write_record(["covariate", "time_offset", "importance", "selected"]).map_err(csv_err)?;
        for e in &ranking.entries {
            let name = names.get(e.covariate).cloned().unwrap_or_else(|| e.covariate.to_string());
            w.write_record([
                name,
                e.time_offset.to_string(),
                e.importance.to_string(),
                u8::from(e.importance > 0.5).to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Zeroes the given covariate columns of a context.
pub fn ablate_columns(x: &Tensor, cols: &[usize]) -> Tensor {
    let d = x.cols();
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if cols.contains(&(i % d)) {
            *v = 0.0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gumbel_inverse_cdf() {
        let g = NoiseLaw::Gumbel.from_uniform(0.5);
        assert!((g - 0.366_512_920_581_664_3).abs() < 1e-12);
        assert_eq!(NoiseLaw::Logistic.from_uniform(0.5), 0.0);
    }

    #[test]
    fn zero_logit_zero_noise_is_half() {
        let mut tape = Tape::new();
        let z = tape.constant(&Tensor::zeros(&[2, 2]));
        let z = tape.scale(z, 1.0);
        let m = tape.sigmoid(z);
        assert!(tape.value(m).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn low_temperature_limits() {
        for (eps, expect) in [(1e-3, 1.0), (-1e-3, 0.0)] {
            let v = crate::autodiff::sigmoid((eps / 1e-6f64).clamp(-LOGIT_CLAMP, LOGIT_CLAMP));
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_terms() {
        let half = Tensor::filled(&[4, 3], 0.5);
        let p = Tensor::zeros(&[2, 1]);
        let w = SelectorLossWeights::with_budget(0.1);
        let b = selector_loss(&half, &p, &p, PredLoss::Mse, &w).unwrap();
        // entropy at 0.5 is ln 2 up to the 1e-8 offset inside the log
        assert!((b.entropy - std::f64::consts::LN_2).abs() < 1e-7);
        assert_eq!(b.tv, 0.0);
        assert!((b.budget - 0.4).abs() < 1e-15);

        let mut m = Tensor::filled(&[4, 3], 0.3);
        m.data_mut()[0] = 0.3;
        let b = selector_loss(&m, &p, &p, PredLoss::Mse, &w).unwrap();
        assert!((b.budget - 0.2).abs() < 1e-12);
        assert!((b.sparsity - 0.3).abs() < 1e-15);
        let expect_group = (4.0 * 0.09 + 1e-8f64).sqrt();
        assert!((b.group - expect_group).abs() < 1e-12);
    }

    #[test]
    fn horizon_weight_masking() {
        let pred = Tensor::new(vec![1.0, 5.0, 9.0], vec![3, 1]).unwrap();
        let target = Tensor::zeros(&[3, 1]);
        let mut tape = Tape::new();
        let (p, t) = (tape.constant(&pred), tape.constant(&target));
        let l = prediction_loss(&mut tape, p, t, PredLoss::Mse, &[1.0, 0.0, 0.0]).unwrap();
        assert!((tape.value(l).item() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn saturated_logits_keep_everything() {
        let cfg = SelectorConfig { init_logit: 10.0, ..SelectorConfig::default() };
        let mut net = MaskNet::new(cfg, 4, 3, 0).unwrap();
        for (name, t) in net.params.names().to_vec().iter().zip(net.params.tensors_mut()) {
            if name.ends_with("weight") {
                t.data_mut().fill(0.0);
            }
        }
        net.tau = 1.0;
        let xs = [Tensor::filled(&[4, 3], 0.7)];
        let r = rank_features(&net, &xs).unwrap();
        assert_eq!(r.mask_ratio, 1.0);
        assert!(r.entries.iter().all(|e| e.importance > 0.9999));
    }

    #[test]
    fn soft_entries_strictly_inside_unit_interval() {
        let mut net = MaskNet::new(SelectorConfig::default(), 5, 2, 1).unwrap();
        for t in net.params.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= 1e4);
        }
        net.tau = 0.01;
        let x = Tensor::new((0..10).map(|i| i as f64 - 5.0).collect(), vec![5, 2]).unwrap();
        let s = net.sample(&x, 3).unwrap();
        assert!(s.soft.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(s.hard.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn hardening_and_straight_through_gradient() {
        let mut tape = Tape::new();
        let z = tape.param(&Tensor::vector(vec![-0.4055, 0.4055]).unwrap());
        let s = tape.sigmoid(z);
        let h = harden(&mut tape, s, Hardening::StraightThrough).unwrap();
        assert_eq!(tape.value(h).data(), &[0.0, 1.0]);
        let loss = tape.sum(h);
        let g = tape.backward(loss).unwrap();
        let grad = g.get(z).unwrap();
        for (gv, zv) in grad.iter().zip([-0.4055f64, 0.4055]) {
            let sv = crate::autodiff::sigmoid(zv);
            assert!((gv - sv * (1.0 - sv)).abs() < 1e-15);
        }
    }

    #[test]
    fn anneal_is_geometric_and_monotone() {
        let cfg = SelectorConfig::default();
        assert_eq!(anneal(&cfg, 0, 10), 5.0);
        assert!((anneal(&cfg, 9, 10) - 0.1).abs() < 1e-12);
        let taus: Vec<f64> = (0..10).map(|e| anneal(&cfg, e, 10)).collect();
        assert!(taus.windows(2).all(|w| w[1] <= w[0]));
        let ratio = taus[1] / taus[0];
        assert!(taus.windows(2).all(|w| (w[1] / w[0] - ratio).abs() < 1e-12));
    }
}
