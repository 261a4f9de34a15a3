//! Batch, joint and online optimization drivers.
//!
//! Every driver binds only the model's own parameter groups, so the frozen
//! backbone never enters an update set; its checksum is compared before and
//! after each run.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterNet, CompositeAdapter, Form, Placement};
use crate::autodiff::{adam_step, AdamState, ParamSet, Tape, Tensor, Var, DEFAULT_LR};
use crate::calibrators::{residual_norms, sum_vars, ConformalCalibrator, QuantileCalibrator};
use crate::data::{SeriesFrame, Window, WindowSet};
use crate::error::{Error, Result};
use crate::forecaster::{BackboneKind, Forecaster};
use crate::metrics::{point_metrics, MetricReport};
use crate::selector::{anneal, harden, prediction_loss, selector_loss_on_tape, MaskNet, PredLoss, SelectorLossWeights};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    Batch,
    Online,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainLoss {
    #[default]
    Mse,
    Mae,
}

impl TrainLoss {
    fn pred_loss(self) -> PredLoss {
        match self {
            TrainLoss::Mse => PredLoss::Mse,
            TrainLoss::Mae => PredLoss::Mae,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// `None` disables early stopping.
    pub early_stop_patience: Option<usize>,
    pub seed: u64,
    pub mode: TrainMode,
    pub joint: bool,
    pub loss: TrainLoss,
    pub selector_weights: SelectorLossWeights,
    /// Records the descent witness on every batch.
    pub diagnostics: bool,
    /// Zeroes wall-clock fields so traces are byte-reproducible.
    pub canonical: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            lr: DEFAULT_LR,
            early_stop_patience: Some(5),
            seed: 0,
            mode: TrainMode::Batch,
            joint: false,
            loss: TrainLoss::Mse,
            selector_weights: SelectorLossWeights::default(),
            diagnostics: false,
            canonical: false,
        }
    }
}

impl TrainConfig {
    /// Checks ranges and applies the online batch-size rule.
    pub fn resolved(&self) -> Result<TrainConfig> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.early_stop_patience == Some(0) {
            return Err(Error::Config("early_stop_patience must be positive".into()));
        }
        self.selector_weights.validate()?;
        let mut cfg = self.clone();
        if cfg.mode == TrainMode::Online {
            cfg.batch_size = 1;
        }
        Ok(cfg)
    }
}

/// Per-call context handed to [`Trainable::batch_graph`].
#[derive(Clone, Copy, Debug)]
pub struct BatchCtx<'a> {
    pub f: &'a Forecaster,
    pub loss: TrainLoss,
    /// Base seed for stochastic models; mixed with each window's origin.
    pub seed: u64,
    /// `false` selects deterministic evaluation (no mask noise).
    pub training: bool,
}

/// Tape handles of one output edit, for the descent witness.
#[derive(Clone, Copy, Debug)]
pub struct EditVars {
    pub pre: Var,
    pub raw: Var,
    pub target: Var,
}

/// The recorded objective of one mini-batch.
pub struct BatchGraph {
    pub loss: Var,
    /// Output-additive edits, filled only by models that have them.
    pub edits: Vec<EditVars>,
}

/// A model the drivers can optimize: one or more parameter groups, each
/// with its own Adam state, stepped together after one backward pass.
pub trait Trainable {
    fn groups(&self) -> Vec<&ParamSet>;

    fn groups_mut(&mut self) -> Vec<&mut ParamSet>;

    /// Records the mean loss over `batch`; `vars[i]` binds `groups()[i]`.
    fn batch_graph(&self, tape: &mut Tape, vars: &[Vec<Var>], batch: &[&Window], ctx: &BatchCtx) -> Result<BatchGraph>;

    /// Point forecast of the enhanced system.
    fn predict(&self, f: &Forecaster, x: &Tensor) -> Result<Tensor>;

    /// Called before each epoch (temperature annealing).
    fn start_epoch(&mut self, _epoch: usize, _epochs: usize) {}

    /// `δ` when the model is an output-additive adapter, the only case the
    /// descent witness covers.
    fn witness_delta(&self) -> Option<f64> {
        None
    }

    /// Extra per-epoch statistics on the validation windows.
    fn epoch_stats(&self, _f: &Forecaster, _windows: &[Window]) -> Result<Vec<(String, f64)>> {
        Ok(Vec::new())
    }
}

fn point_loss(tape: &mut Tape, pred: Var, y: Var, loss: TrainLoss) -> Result<Var> {
    prediction_loss(tape, pred, y, loss.pred_loss(), &[])
}

fn mean_of(tape: &mut Tape, losses: &[Var]) -> Result<Var> {
    let s = sum_vars(tape, losses)?;
    Ok(tape.scale(s, 1.0 / losses.len().max(1) as f64))
}

impl Trainable for AdapterNet {
    fn groups(&self) -> Vec<&ParamSet> {
        vec![&self.params]
    }

    fn groups_mut(&mut self) -> Vec<&mut ParamSet> {
        vec![&mut self.params]
    }

    fn batch_graph(&self, tape: &mut Tape, vars: &[Vec<Var>], batch: &[&Window], ctx: &BatchCtx) -> Result<BatchGraph> {
        let mut losses = Vec::with_capacity(batch.len());
        let mut edits = Vec::new();
        for w in batch {
            let x = tape.constant(&w.x);
            let y = tape.constant(&w.y);
            let pred = match self.placement() {
                Placement::Input => {
                    let (x_tilde, _) = self.apply_on_tape(tape, &vars[0], x, x)?;
                    ctx.f.predict_on_tape(tape, x_tilde)?
                }
                Placement::Output => {
                    let y_hat = ctx.f.predict_on_tape(tape, x)?;
                    let (post, a) = self.apply_on_tape(tape, &vars[0], y_hat, x)?;
                    edits.push(EditVars { pre: y_hat, raw: a, target: y });
                    post
                }
            };
            losses.push(point_loss(tape, pred, y, ctx.loss)?);
        }
        Ok(BatchGraph { loss: mean_of(tape, &losses)?, edits })
    }

    fn predict(&self, f: &Forecaster, x: &Tensor) -> Result<Tensor> {
        match self.placement() {
            Placement::Input => {
                let (x_tilde, _) = crate::adapters::nudge_input(self, x)?;
                f.predict(&x_tilde)
            }
            Placement::Output => Ok(crate::adapters::correct_output(self, &f.predict(x)?, x)?.0),
        }
    }

    fn witness_delta(&self) -> Option<f64> {
        (self.placement() == Placement::Output && self.form() == Form::Additive).then(|| self.delta())
    }
}

impl Trainable for CompositeAdapter {
    fn groups(&self) -> Vec<&ParamSet> {
        let mut g = vec![&self.input.params, &self.output.params];
        g.extend(self.gate.as_ref());
        g
    }

    fn groups_mut(&mut self) -> Vec<&mut ParamSet> {
        let mut g = vec![&mut self.input.params, &mut self.output.params];
        g.extend(self.gate.as_mut());
        g
    }

    fn batch_graph(&self, tape: &mut Tape, vars: &[Vec<Var>], batch: &[&Window], ctx: &BatchCtx) -> Result<BatchGraph> {
        let gate_vars: &[Var] = vars.get(2).map_or(&[], Vec::as_slice);
        let mut losses = Vec::with_capacity(batch.len());
        for w in batch {
            let x = tape.constant(&w.x);
            let y = tape.constant(&w.y);
            let (pred, _, _) = self.forward_on_tape(tape, ctx.f, &vars[0], &vars[1], gate_vars, x)?;
            losses.push(point_loss(tape, pred, y, ctx.loss)?);
        }
        Ok(BatchGraph { loss: mean_of(tape, &losses)?, edits: Vec::new() })
    }

    fn predict(&self, f: &Forecaster, x: &Tensor) -> Result<Tensor> {
        Ok(crate::adapters::apply_composite(self, f, x)?.0)
    }
}

/// Mask network plus its objective; the backbone sees `X ⊙ M`.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectorModel {
    pub mask: MaskNet,
    pub weights: SelectorLossWeights,
    pub pred_loss: PredLoss,
}

impl SelectorModel {
    pub fn new(mask: MaskNet, weights: SelectorLossWeights, pred_loss: PredLoss) -> Result<Self> {
        weights.validate()?;
        Ok(SelectorModel { mask, weights, pred_loss })
    }
}

impl Trainable for SelectorModel {
    fn groups(&self) -> Vec<&ParamSet> {
        vec![&self.mask.params]
    }

    fn groups_mut(&mut self) -> Vec<&mut ParamSet> {
        vec![&mut self.mask.params]
    }

    fn batch_graph(&self, tape: &mut Tape, vars: &[Vec<Var>], batch: &[&Window], ctx: &BatchCtx) -> Result<BatchGraph> {
        let mut losses = Vec::with_capacity(batch.len());
        for w in batch {
            let noise = ctx.training.then(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(ctx.seed, w.origin as u64));
                self.mask.draw_noise(&mut rng)
            });
            let x = tape.constant(&w.x);
            let y = tape.constant(&w.y);
            let soft = self.mask.soft_on_tape(tape, &vars[0], x, noise.as_ref(), self.mask.tau)?;
            let applied = harden(tape, soft, self.mask.config.hardening)?;
            let masked = tape.mul(x, applied)?;
            let pred = ctx.f.predict_on_tape(tape, masked)?;
            let (total, _) = selector_loss_on_tape(tape, soft, pred, y, self.pred_loss, &self.weights)?;
            losses.push(total);
        }
        Ok(BatchGraph { loss: mean_of(tape, &losses)?, edits: Vec::new() })
    }

    fn predict(&self, f: &Forecaster, x: &Tensor) -> Result<Tensor> {
        let m = self.mask.applied_mask(x)?;
        let masked = Tensor::new(x.data().iter().zip(m.data()).map(|(a, b)| a * b).collect(), x.shape().to_vec())?;
        f.predict(&masked)
    }

    fn start_epoch(&mut self, epoch: usize, epochs: usize) {
        self.mask.tau = anneal(&self.mask.config, epoch, epochs);
    }

    /// Mean keep rate and mean binary entropy of the noise-free masks.
    fn epoch_stats(&self, _f: &Forecaster, windows: &[Window]) -> Result<Vec<(String, f64)>> {
        if windows.is_empty() {
            return Ok(Vec::new());
        }
        let (mut keep, mut ent) = (0.0, 0.0);
        for w in windows {
            let s = self.mask.infer(&w.x)?;
            keep += s.keep_rate;
            ent += s.soft.data().iter().map(|&m| binary_entropy(m)).sum::<f64>() / s.soft.len() as f64;
        }
        let n = windows.len() as f64;
        Ok(vec![("tau".into(), self.mask.tau), ("keep_rate".into(), keep / n), ("entropy".into(), ent / n)])
    }
}

fn binary_entropy(m: f64) -> f64 {
    let e = 1e-8;
    -(m * (m + e).ln() + (1.0 - m) * (1.0 - m + e).ln())
}

impl Trainable for QuantileCalibrator {
    fn groups(&self) -> Vec<&ParamSet> {
        vec![&self.params]
    }

    fn groups_mut(&mut self) -> Vec<&mut ParamSet> {
        vec![&mut self.params]
    }

    fn batch_graph(&self, tape: &mut Tape, vars: &[Vec<Var>], batch: &[&Window], ctx: &BatchCtx) -> Result<BatchGraph> {
        let mut triples = Vec::with_capacity(batch.len());
        for w in batch {
            let y_hat = ctx.f.predict(&w.x)?;
            triples.push((tape.constant(&w.x), tape.constant(&y_hat), tape.constant(&w.y)));
        }
        Ok(BatchGraph { loss: self.batch_loss_on_tape(tape, &vars[0], &triples)?, edits: Vec::new() })
    }

    fn predict(&self, f: &Forecaster, x: &Tensor) -> Result<Tensor> {
        f.predict(x)
    }
}

impl Trainable for ConformalCalibrator {
    fn groups(&self) -> Vec<&ParamSet> {
        vec![&self.params]
    }

    fn groups_mut(&mut self) -> Vec<&mut ParamSet> {
        vec![&mut self.params]
    }

    fn batch_graph(&self, tape: &mut Tape, vars: &[Vec<Var>], batch: &[&Window], ctx: &BatchCtx) -> Result<BatchGraph> {
        let mut losses = Vec::with_capacity(batch.len());
        for w in batch {
            let y_hat = ctx.f.predict(&w.x)?;
            let rho = Tensor::new(residual_norms(&w.y, &y_hat)?, vec![1, y_hat.rows()])?;
            let (x, yh) = (tape.constant(&w.x), tape.constant(&y_hat));
            losses.push(self.sample_loss_on_tape(tape, &vars[0], x, yh, &rho)?);
        }
        Ok(BatchGraph { loss: mean_of(tape, &losses)?, edits: Vec::new() })
    }

    fn predict(&self, f: &Forecaster, x: &Tensor) -> Result<Tensor> {
        f.predict(x)
    }
}

/// Fine-tuning baseline: trains a copy of a built-in backbone's own weights.
///
/// Excluded from every adapter guarantee. The original backbone passed to
/// the drivers stays frozen; [`Unfrozen::forecaster`] rebuilds the tuned copy.
#[derive(Clone, Debug)]
pub struct Unfrozen {
    base: Forecaster,
    pub params: ParamSet,
}

impl Unfrozen {
    /// Affine and tiny-MLP backbones only; the others hold no trainable weights.
    pub fn new(f: &Forecaster) -> Result<Self> {
        let arrays = f.param_arrays();
        let mut params = ParamSet::new();
        match f.kind() {
            BackboneKind::LinearAr => {
                // stored as `vec(X)·Wᵀ + b` so the tape never transposes
                params.push("weight_t", arrays[0].1.transpose());
                params.push("bias", arrays[1].1.reshape(&[1, f.shapes().output_len()])?);
            }
            BackboneKind::TinyMlp => {
                for (name, t) in arrays {
                    params.push(name, t.clone());
                }
            }
            k => return Err(Error::Unsupported(format!("a {k} backbone has no weights to unfreeze"))),
        }
        Ok(Unfrozen { base: f.clone(), params })
    }

    /// The tuned backbone as a standalone forecaster.
    pub fn forecaster(&self) -> Result<Forecaster> {
        let s = self.base.shapes();
        let p = self.params.tensors();
        let f = match self.base.kind() {
            BackboneKind::LinearAr => Forecaster::linear(s, p[0].transpose(), p[1].clone())?,
            _ => Forecaster::tiny_mlp(s, p[0].clone(), p[1].clone(), p[2].clone(), p[3].clone())?,
        };
        Ok(match self.base.fit_config() {
            Some(c) => f.with_fit_config(c.clone()),
            None => f,
        })
    }

    fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let s = self.base.shapes();
        let flat = tape.reshape(x, &[1, s.input_len()])?;
        let o = if self.base.kind() == BackboneKind::LinearAr {
            let z = tape.matmul(flat, vars[0])?;
            tape.add(z, vars[1])?
        } else {
            let z = tape.matmul(flat, vars[0])?;
            let z = tape.add(z, vars[1])?;
            let a = tape.tanh(z);
            let o = tape.matmul(a, vars[2])?;
            tape.add(o, vars[3])?
        };
        tape.reshape(o, &s.output_shape())
    }
}

impl Trainable for Unfrozen {
    fn groups(&self) -> Vec<&ParamSet> {
        vec![&self.params]
    }

    fn groups_mut(&mut self) -> Vec<&mut ParamSet> {
        vec![&mut self.params]
    }

    fn batch_graph(&self, tape: &mut Tape, vars: &[Vec<Var>], batch: &[&Window], ctx: &BatchCtx) -> Result<BatchGraph> {
        let mut losses = Vec::with_capacity(batch.len());
        for w in batch {
            let x = tape.constant(&w.x);
            let y = tape.constant(&w.y);
            let pred = self.forward(tape, &vars[0], x)?;
            losses.push(point_loss(tape, pred, y, ctx.loss)?);
        }
        Ok(BatchGraph { loss: mean_of(tape, &losses)?, edits: Vec::new() })
    }

    fn predict(&self, _f: &Forecaster, x: &Tensor) -> Result<Tensor> {
        self.base.shapes().check_input(x)?;
        let mut tape = Tape::new();
        let vars = self.params.bind_frozen(&mut tape);
        let xv = tape.constant(x);
        let y = self.forward(&mut tape, &vars, xv)?;
        Ok(tape.value(y).clone())
    }
}

/// SplitMix64 finalizer over `a ⊕ rot(b)`; used to derive sub-seeds.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.rotate_left(32) ^ 0x9E37_79B9_7F4A_7C15;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One row of a trace file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch_or_step: usize,
    pub split: String,
    pub loss: f64,
    pub mse: Option<f64>,
    pub mae: Option<f64>,
    pub wall_ms: f64,
}

/// Descent witness for one batch (or one sample).
///
/// `g = Ŷ − y`, `d = A`; `alignment = −⟨g,d⟩/(‖g‖‖d‖)` is the measured α,
/// and the step condition is `δ < 2α‖g‖/‖d‖`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescentRecord {
    pub epoch: usize,
    pub batch: usize,
    pub alignment: f64,
    pub delta: f64,
    pub step_condition: bool,
    /// `ℓ(Ŷ + δd) − ℓ(Ŷ)` with `ℓ = ½‖·−y‖²`.
    pub realized: f64,
    /// `−δα‖g‖‖d‖ + ½δ²‖d‖²`.
    pub bound: f64,
}

impl DescentRecord {
    /// Applies when the alignment is positive and the step condition holds.
    pub fn applies(&self) -> bool {
        self.alignment > 0.0 && self.step_condition
    }

    pub fn violated(&self) -> bool {
        self.applies() && !(self.realized < 0.0 && self.realized <= self.bound + 1e-12 * self.bound.abs().max(1.0))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DescentWitness {
    pub batches: Vec<DescentRecord>,
    pub samples_checked: usize,
    pub sample_violations: usize,
}

impl DescentWitness {
    pub fn batch_violations(&self) -> usize {
        self.batches.iter().filter(|r| r.violated()).count()
    }

    pub fn batches_applicable(&self) -> usize {
        self.batches.iter().filter(|r| r.applies()).count()
    }
}

/// Witness of `Ŷ → Ŷ + δd` against `y`; `None` when `d` or `g` vanishes.
fn descent_record(pre: &[f64], raw: &[f64], y: &[f64], delta: f64) -> Option<DescentRecord> {
    let (mut gd, mut gg, mut dd, mut realized) = (0.0, 0.0, 0.0, 0.0);
    for ((&p, &a), &t) in pre.iter().zip(raw).zip(y) {
        let g = p - t;
        let u = p + delta * a - t;
        gd += g * a;
        gg += g * g;
        dd += a * a;
        // ½(u² − g²) factored to avoid cancellation
        realized += 0.5 * (u - g) * (u + g);
    }
    if gg == 0.0 || dd == 0.0 {
        return None;
    }
    let (gn, dn) = (gg.sqrt(), dd.sqrt());
    let alignment = -gd / (gn * dn);
    Some(DescentRecord {
        epoch: 0,
        batch: 0,
        alignment,
        delta,
        step_condition: delta < 2.0 * alignment * gn / dn,
        realized,
        bound: -delta * alignment * gn * dn + 0.5 * delta * delta * dd,
    })
}

/// Result of a batch run; the model itself is updated in place.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub trace: Vec<TraceRow>,
    pub val_losses: Vec<f64>,
    /// 1-based; 0 when no epoch ran.
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub early_stopped: bool,
    pub epoch_stats: Vec<Vec<(String, f64)>>,
    pub witness: Option<DescentWitness>,
    pub backbone_checksum: String,
}

/// Outcome of [`early_stop`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EarlyStop {
    /// 1-based epoch of the minimum validation loss (first on ties).
    pub best_epoch: usize,
    /// 1-based epoch after which training stops.
    pub stop_epoch: usize,
}

/// Scans a validation trace with the given patience.
pub fn early_stop(trace: &[f64], patience: usize) -> Result<EarlyStop> {
    if trace.is_empty() {
        return Err(Error::Contract("early_stop needs a non-empty trace".into()));
    }
    let mut best = 0;
    for (i, &v) in trace.iter().enumerate() {
        if v < trace[best] {
            best = i;
        }
        if i - best >= patience {
            return Ok(EarlyStop { best_epoch: best + 1, stop_epoch: i + 1 });
        }
    }
    Ok(EarlyStop { best_epoch: best + 1, stop_epoch: trace.len() })
}

fn snapshot<M: Trainable + ?Sized>(model: &M) -> Vec<Vec<f64>> {
    model.groups().iter().map(|g| g.flat_values()).collect()
}

fn restore<M: Trainable + ?Sized>(model: &mut M, snap: &[Vec<f64>]) -> Result<()> {
    for (g, v) in model.groups_mut().into_iter().zip(snap) {
        g.set_flat_values(v)?;
    }
    Ok(())
}

fn ms_since(start: Instant, canonical: bool) -> f64 {
    if canonical {
        0.0
    } else {
        start.elapsed().as_secs_f64() * 1e3
    }
}

/// One forward/backward/Adam step; returns the loss and, when asked, the
/// output edits' values read before the tape is consumed.
fn step<M: Trainable + ?Sized>(
    model: &mut M,
    adam: &mut [AdamState],
    batch: &[&Window],
    ctx: &BatchCtx,
    want_edits: bool,
) -> Result<(f64, Vec<[Tensor; 3]>)> {
    let mut tape = Tape::new();
    let vars: Vec<Vec<Var>> = model.groups().iter().map(|g| g.bind(&mut tape)).collect();
    let graph = model.batch_graph(&mut tape, &vars, batch, ctx)?;
    let loss = tape.value(graph.loss).item();
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "loss".into() });
    }
    let edits = if want_edits {
        graph.edits.iter().map(|e| [e.pre, e.raw, e.target].map(|v| tape.value(v).clone())).collect()
    } else {
        Vec::new()
    };
    let grads = tape.backward(graph.loss)?;
    for ((g, v), st) in model.groups_mut().into_iter().zip(&vars).zip(adam.iter_mut()) {
        g.absorb(&grads, v);
        adam_step(g, st)?;
    }
    Ok((loss, edits))
}

/// Deterministic mean objective over `windows`, evaluated in chunks.
pub fn eval_loss<M: Trainable + ?Sized>(
    model: &M,
    f: &Forecaster,
    windows: &[Window],
    cfg: &TrainConfig,
) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Data("no windows to evaluate".into()));
    }
    let ctx = BatchCtx { f, loss: cfg.loss, seed: cfg.seed, training: false };
    let mut total = 0.0;
    for chunk in windows.chunks(cfg.batch_size.max(1)) {
        let refs: Vec<&Window> = chunk.iter().collect();
        let mut tape = Tape::new();
        let vars: Vec<Vec<Var>> = model.groups().iter().map(|g| g.bind_frozen(&mut tape)).collect();
        let g = model.batch_graph(&mut tape, &vars, &refs, &ctx)?;
        total += tape.value(g.loss).item() * chunk.len() as f64;
    }
    Ok(total / windows.len() as f64)
}

/// Point metrics of the enhanced system over `windows`.
pub fn evaluate<M: Trainable + ?Sized>(model: &M, f: &Forecaster, windows: &[Window]) -> Result<MetricReport> {
    let preds = windows.iter().map(|w| model.predict(f, &w.x)).collect::<Result<Vec<_>>>()?;
    let targets: Vec<Tensor> = windows.iter().map(|w| w.y.clone()).collect();
    point_metrics(&preds, &targets, None)
}

/// Point metrics of the frozen backbone alone.
pub fn evaluate_frozen(f: &Forecaster, windows: &[Window]) -> Result<MetricReport> {
    let preds = windows.iter().map(|w| f.predict(&w.x)).collect::<Result<Vec<_>>>()?;
    let targets: Vec<Tensor> = windows.iter().map(|w| w.y.clone()).collect();
    point_metrics(&preds, &targets, None)
}

/// Gradients of the mean loss over `batch` at the current parameters, one
/// flat vector per group; nothing is updated.
pub fn batch_gradients<M: Trainable + ?Sized>(
    model: &M,
    f: &Forecaster,
    batch: &[&Window],
    cfg: &TrainConfig,
) -> Result<Vec<Vec<f64>>> {
    let ctx = BatchCtx { f, loss: cfg.loss, seed: cfg.seed, training: true };
    let mut tape = Tape::new();
    let vars: Vec<Vec<Var>> = model.groups().iter().map(|g| g.bind(&mut tape)).collect();
    let graph = model.batch_graph(&mut tape, &vars, batch, &ctx)?;
    let grads = tape.backward(graph.loss)?;
    Ok(model
        .groups()
        .iter()
        .zip(&vars)
        .map(|(g, vs)| g.tensors().iter().zip(vs).flat_map(|(t, &v)| grads.get_or_zero(v, t.len())).collect())
        .collect())
}

fn check_frozen(f: &Forecaster, before: &str) -> Result<()> {
    if f.checksum() != before {
        return Err(Error::Contract("backbone parameters changed during training".into()));
    }
    Ok(())
}

/// Mini-batch Adam with early stopping on the validation objective.
///
/// On a non-finite loss the model is restored to its best parameters so far
/// and [`Error::Divergence`] is returned.
pub fn train_batch<M: Trainable + ?Sized>(
    model: &mut M,
    f: &Forecaster,
    train: &[Window],
    val: &[Window],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let cfg = cfg.resolved()?;
    if train.is_empty() {
        return Err(Error::Data("no training windows".into()));
    }
    let checksum = f.checksum();
    let patience = if val.is_empty() {
        if cfg.epochs > 0 {
            log::warn!("validation split is empty; early stopping disabled");
        }
        None
    } else {
        cfg.early_stop_patience
    };
    let mut adam: Vec<AdamState> = model.groups().iter().map(|g| AdamState::new(g, cfg.lr)).collect();
    let mut out = TrainOutcome {
        backbone_checksum: checksum.clone(),
        witness: cfg.diagnostics.then(DescentWitness::default),
        ..TrainOutcome::default()
    };
    let mut best = snapshot(model);
    let mut best_val = f64::INFINITY;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let start = Instant::now();
    for epoch in 0..cfg.epochs {
        model.start_epoch(epoch, cfg.epochs);
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Window> = idx.iter().map(|&i| &train[i]).collect();
            let ctx =
                BatchCtx { f, loss: cfg.loss, seed: mix(cfg.seed, (epoch as u64) << 32 | bi as u64), training: true };
            let delta = model.witness_delta();
            let res = step(model, &mut adam, &batch, &ctx, out.witness.is_some() && delta.is_some());
            let (loss, edits) = match res {
                Ok(v) => v,
                Err(Error::NonFinite { .. }) | Err(Error::Training { .. }) => {
                    restore(model, &best)?;
                    return Err(Error::Divergence { epoch: epoch + 1 });
                }
                Err(e) => return Err(e),
            };
            sum += loss * batch.len() as f64;
            if let (Some(w), Some(delta)) = (out.witness.as_mut(), delta) {
                record_witness(w, &edits, delta, epoch, bi);
            }
        }
        let train_loss = sum / train.len() as f64;
        out.trace.push(TraceRow {
            epoch_or_step: epoch + 1,
            split: "train".into(),
            loss: train_loss,
            mse: None,
            mae: None,
            wall_ms: ms_since(start, cfg.canonical),
        });
        out.epochs_run = epoch + 1;
        if val.is_empty() {
            best = snapshot(model);
            out.best_epoch = epoch + 1;
            continue;
        }
        let v = eval_loss(model, f, val, &cfg)?;
        if !v.is_finite() {
            restore(model, &best)?;
            return Err(Error::Divergence { epoch: epoch + 1 });
        }
        let report = evaluate(model, f, val)?;
        out.trace.push(TraceRow {
            epoch_or_step: epoch + 1,
            split: "val".into(),
            loss: v,
            mse: Some(report.mse),
            mae: Some(report.mae),
            wall_ms: ms_since(start, cfg.canonical),
        });
        out.epoch_stats.push(model.epoch_stats(f, val)?);
        out.val_losses.push(v);
        if v < best_val {
            best_val = v;
            best = snapshot(model);
            out.best_epoch = epoch + 1;
        }
        if let Some(p) = patience {
            if early_stop(&out.val_losses, p)?.stop_epoch <= epoch && epoch + 1 < cfg.epochs {
                out.early_stopped = true;
                break;
            }
        }
    }
    if patience.is_some() && out.epochs_run > 0 {
        restore(model, &best)?;
    }
    check_frozen(f, &checksum)?;
    Ok(out)
}

fn record_witness(w: &mut DescentWitness, edits: &[[Tensor; 3]], delta: f64, epoch: usize, batch: usize) {
    let (mut pre, mut raw, mut y) = (Vec::new(), Vec::new(), Vec::new());
    for [p, a, t] in edits {
        if let Some(r) = descent_record(p.data(), a.data(), t.data(), delta) {
            w.samples_checked += 1;
            if r.violated() {
                w.sample_violations += 1;
            }
        }
        pre.extend_from_slice(p.data());
        raw.extend_from_slice(a.data());
        y.extend_from_slice(t.data());
    }
    if let Some(mut r) = descent_record(&pre, &raw, &y, delta) {
        r.epoch = epoch + 1;
        r.batch = batch;
        w.batches.push(r);
    }
}

/// Ada-X+Y: one forward pass through nudge → F → correct per step, one
/// backward pass, and one Adam optimizer per adapter stepped together.
pub fn train_joint(
    composite: &mut CompositeAdapter,
    f: &Forecaster,
    train: &[Window],
    val: &[Window],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if !cfg.joint {
        return Err(Error::Config("train_joint requires joint = true".into()));
    }
    train_batch(composite, f, train, val, cfg)
}

/// Row-at-a-time reader over a standardized series that records every
/// index it hands out.
#[derive(Clone, Debug)]
pub struct ObservationStream {
    rows: Tensor,
    input_cols: Vec<usize>,
    target_cols: Vec<usize>,
    max_read: Option<usize>,
    reads: usize,
}

impl ObservationStream {
    /// `rows` is `T × width`; windows take `input_cols` as `X` and
    /// `target_cols` as `Y`.
    pub fn new(rows: Tensor, input_cols: Vec<usize>, target_cols: Vec<usize>) -> Result<Self> {
        let w = rows.cols();
        if input_cols.iter().chain(&target_cols).any(|&c| c >= w) {
            return Err(Error::dim("ObservationStream", format!("column index out of range for width {w}")));
        }
        Ok(ObservationStream { rows, input_cols, target_cols, max_read: None, reads: 0 })
    }

    /// Standardizes `frame` with the statistics of `ws` (fit on its train rows).
    pub fn from_windows(frame: &SeriesFrame, ws: &WindowSet) -> Result<Self> {
        let (t, width) = (frame.len(), frame.width());
        let mut data = frame.values.data().to_vec();
        for (k, &c) in ws.scaled_cols.iter().enumerate() {
            for r in 0..t {
                data[r * width + c] = ws.scaler.transform(k, frame.values.get(r, c));
            }
        }
        Self::new(Tensor::new(data, vec![t, width])?, ws.input_cols.clone(), ws.target_cols.clone())
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn read(&mut self, i: usize) -> Result<Vec<f64>> {
        if i >= self.len() {
            return Err(Error::Data(format!("stream index {i} past end {}", self.len())));
        }
        self.reads += 1;
        self.max_read = Some(self.max_read.map_or(i, |m| m.max(i)));
        Ok(self.rows.row(i).to_vec())
    }

    pub fn max_read(&self) -> Option<usize> {
        self.max_read
    }

    pub fn reads(&self) -> usize {
        self.reads
    }
}

/// Ring of the last `L + H` observed rows.
///
/// After observing index `t` it emits the lagged sample with input rows
/// `t−H−L+1 ..= t−H` and labels `t−H+1 ..= t`, so every label has already
/// been observed.
#[derive(Clone, Debug)]
pub struct StreamingBuffer {
    pub lookback: usize,
    pub horizon: usize,
    clock: Option<usize>,
    pending: VecDeque<Vec<f64>>,
}

impl StreamingBuffer {
    pub fn new(lookback: usize, horizon: usize) -> Self {
        StreamingBuffer { lookback, horizon, clock: None, pending: VecDeque::with_capacity(lookback + horizon) }
    }

    /// Index of the most recent observation.
    pub fn clock(&self) -> Option<usize> {
        self.clock
    }

    /// Reads exactly the next index from the stream.
    pub fn observe(&mut self, stream: &mut ObservationStream) -> Result<usize> {
        let t = self.clock.map_or(0, |c| c + 1);
        let row = stream.read(t)?;
        if self.pending.len() == self.lookback + self.horizon {
            self.pending.pop_front();
        }
        self.pending.push_back(row);
        self.clock = Some(t);
        Ok(t)
    }

    fn gather(&self, rows: std::ops::Range<usize>, cols: &[usize]) -> Result<Tensor> {
        let n = rows.len();
        let data: Vec<f64> =
            rows.flat_map(|r| cols.iter().map(move |&c| (r, c))).map(|(r, c)| self.pending[r][c]).collect();
        Tensor::new(data, vec![n, cols.len()])
    }

    /// Context `X_{t−L+1..=t}` for forecasting rows `t+1..=t+H`.
    pub fn context(&self, stream: &ObservationStream) -> Result<Option<Tensor>> {
        let n = self.pending.len();
        if n < self.lookback {
            return Ok(None);
        }
        self.gather(n - self.lookback..n, &stream.input_cols).map(Some)
    }

    /// The lagged, fully labeled sample; its `origin` is its first input row.
    pub fn sample(&self, stream: &ObservationStream) -> Result<Option<Window>> {
        let (l, h) = (self.lookback, self.horizon);
        if self.pending.len() < l + h {
            return Ok(None);
        }
        let t = self.clock.expect("full buffer has a clock");
        Ok(Some(Window {
            x: self.gather(0..l, &stream.input_cols)?,
            y: self.gather(l..l + h, &stream.target_cols)?,
            origin: t + 1 - l - h,
        }))
    }
}

/// Leakage check: at clock `t` nothing beyond `t` may have been read.
pub fn check_leakage(max_read: Option<usize>, clock: usize) -> Result<()> {
    match max_read {
        Some(m) if m > clock => Err(Error::Leakage(format!("read index {m} at clock {clock}"))),
        _ => Ok(()),
    }
}

/// One online step, logged once the lagged sample exists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnlineStep {
    pub t: usize,
    /// Error of the forecast made at `t − H` for rows `t−H+1..=t`.
    pub adapted_mse: f64,
    pub adapted_mae: f64,
    pub frozen_mse: f64,
    pub frozen_mae: f64,
    /// Loss of the single-sample update taken at `t`.
    pub update_loss: f64,
    pub max_read_index: usize,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnlineLog {
    pub steps: Vec<OnlineStep>,
    /// Forecasts `(t, Ŷ_adapted)` made from context ending at `t`.
    pub predictions: Vec<(usize, Tensor)>,
    pub attestation: String,
    pub backbone_checksum: String,
}

impl OnlineLog {
    pub fn trace(&self) -> Vec<TraceRow> {
        self.steps
            .iter()
            .map(|s| TraceRow {
                epoch_or_step: s.t,
                split: "online".into(),
                loss: s.update_loss,
                mse: Some(s.adapted_mse),
                mae: Some(s.adapted_mae),
                wall_ms: s.wall_ms,
            })
            .collect()
    }
}

fn sq_abs(a: &Tensor, b: &Tensor) -> (f64, f64) {
    let n = a.len() as f64;
    let (mut s, mut m) = (0.0, 0.0);
    for (x, y) in a.data().iter().zip(b.data()) {
        s += (x - y) * (x - y);
        m += (x - y).abs();
    }
    (s / n, m / n)
}

/// Streaming protocol at batch size 1: at each `t`, forecast from the
/// latest context, pull the lagged labeled sample, and take one Adam step.
/// Any read beyond the clock aborts with [`Error::Leakage`].
pub fn run_online<M: Trainable + ?Sized>(
    model: &mut M,
    f: &Forecaster,
    stream: &mut ObservationStream,
    cfg: &TrainConfig,
) -> Result<OnlineLog> {
    let cfg = TrainConfig { mode: TrainMode::Online, ..cfg.clone() }.resolved()?;
    let shapes = f.shapes();
    let (l, h) = (shapes.lookback, shapes.horizon);
    if stream.len() <= l + h {
        return Err(Error::Data(format!("stream of {} rows is too short for L={l}, H={h}", stream.len())));
    }
    let checksum = f.checksum();
    let mut adam: Vec<AdamState> = model.groups().iter().map(|g| AdamState::new(g, cfg.lr)).collect();
    let mut buffer = StreamingBuffer::new(l, h);
    let mut pending: VecDeque<(usize, Tensor, Tensor)> = VecDeque::new();
    let mut log = OnlineLog {
        steps: Vec::new(),
        predictions: Vec::new(),
        attestation: String::new(),
        backbone_checksum: checksum.clone(),
    };
    let start = Instant::now();
    for _ in 0..stream.len() {
        let t = buffer.observe(stream)?;
        check_leakage(stream.max_read(), t)?;
        if let Some(x) = buffer.context(stream)? {
            let adapted = model.predict(f, &x)?;
            let frozen = f.predict(&x)?;
            log.predictions.push((t, adapted.clone()));
            pending.push_back((t, adapted, frozen));
        }
        let Some(sample) = buffer.sample(stream)? else {
            continue;
        };
        let (made_at, adapted, frozen) = pending.pop_front().expect("forecast logged H steps ago");
        debug_assert_eq!(made_at + h, t);
        let (adapted_mse, adapted_mae) = sq_abs(&adapted, &sample.y);
        let (frozen_mse, frozen_mae) = sq_abs(&frozen, &sample.y);
        let ctx = BatchCtx { f, loss: cfg.loss, seed: mix(cfg.seed, t as u64), training: true };
        let (update_loss, _) = step(model, &mut adam, &[&sample], &ctx, false).map_err(|e| match e {
            Error::NonFinite { .. } => Error::Divergence { epoch: t },
            e => e,
        })?;
        let max_read = stream.max_read().expect("observed at least one row");
        check_leakage(Some(max_read), t)?;
        if max_read != t {
            return Err(Error::Leakage(format!("max read index {max_read} differs from clock {t}")));
        }
        log.steps.push(OnlineStep {
            t,
            adapted_mse,
            adapted_mae,
            frozen_mse,
            frozen_mae,
            update_loss,
            max_read_index: max_read,
            wall_ms: ms_since(start, cfg.canonical),
        });
    }
    check_frozen(f, &checksum)?;
    log.attestation = format!("# leakage_probe: max_read_index == clock at all {} steps", log.steps.len());
    Ok(log)
}

/// Writes `epoch_or_step,split,loss,mse,mae,wall_ms`, then any comment lines.
pub fn write_trace(path: &Path, rows: &[TraceRow], comments: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let err = |e: csv::Error| Error::Data(e.to_string());
    w.write_record(["epoch_or_step", "split", "loss", "mse", "mae", "wall_ms"]).map_err(err)?;
    let opt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
    for r in rows {
        w.write_record([
            r.epoch_or_step.to_string(),
            r.split.clone(),
            r.loss.to_string(),
            opt(r.mse),
            opt(r.mae),
            r.wall_ms.to_string(),
        ])
        .map_err(err)?;
    }
    let mut inner = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    for c in comments {
        writeln!(inner, "{c}").map_err(|e| Error::io(path, e))?;
    }
    inner.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::AdapterConfig;
    use crate::forecaster::Shapes;
    use rand::Rng;

    fn shapes() -> Shapes {
        Shapes::new(4, 2, 3, 1)
    }

    /// `F ≡ b` (zero weights, constant bias).
    fn constant_backbone(b: f64) -> Forecaster {
        let s = shapes();
        Forecaster::linear(s, Tensor::zeros(&[s.output_len(), s.input_len()]), Tensor::filled(&[s.output_len()], b))
            .unwrap()
    }

    fn random_backbone(seed: u64) -> Forecaster {
        let s = shapes();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = (0..s.output_len() * s.input_len()).map(|_| rng.random_range(-0.3..0.3)).collect();
        Forecaster::linear(
            s,
            Tensor::new(w, vec![s.output_len(), s.input_len()]).unwrap(),
            Tensor::zeros(&[s.output_len()]),
        )
        .unwrap()
    }

    fn windows(n: usize, target: f64, seed: u64) -> Vec<Window> {
        let s = shapes();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|o| Window {
                x: Tensor::new(
                    (0..s.input_len()).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    vec![s.lookback, s.covariates],
                )
                .unwrap(),
                y: Tensor::filled(&[s.horizon, s.targets], target),
                origin: o,
            })
            .collect()
    }

    fn out_adapter(delta: f64, seed: u64) -> AdapterNet {
        let cfg = AdapterConfig { hidden_width: 16, ..AdapterConfig::new(Placement::Output, Form::Additive, delta) };
        AdapterNet::new(cfg, shapes(), seed).unwrap()
    }

    fn fast(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 8,
            lr: 1e-2,
            early_stop_patience: None,
            canonical: true,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn early_stop_examples() {
        let e = early_stop(&[1.0, 0.5, 0.6, 0.7, 0.8], 3).unwrap();
        assert_eq!((e.best_epoch, e.stop_epoch), (2, 5));
        assert_eq!(early_stop(&[3.0, 2.0, 1.0], 2).unwrap().best_epoch, 3);
        assert_eq!(early_stop(&[1.0; 6], 5).unwrap().best_epoch, 1);
        assert!(early_stop(&[], 5).is_err());
    }

    #[test]
    fn saturation_floor() {
        let f = constant_backbone(0.0);
        let train = windows(64, 1.0, 1);
        let mut net = out_adapter(0.1, 3);
        train_batch(&mut net, &f, &train, &[], &fast(40)).unwrap();
        let mse = evaluate(&net, &f, &train).unwrap().mse;
        assert!((0.80..=0.82).contains(&mse), "{mse}");
        assert!(mse >= 0.81 - 1e-12);
    }

    #[test]
    fn bias_within_reach() {
        let f = constant_backbone(-0.05);
        let train = windows(64, 0.0, 2);
        let mut net = out_adapter(0.1, 4);
        assert!((evaluate_frozen(&f, &train).unwrap().mse - 2.5e-3).abs() < 1e-15);
        train_batch(&mut net, &f, &train, &train[..16], &fast(40)).unwrap();
        assert!(evaluate(&net, &f, &train).unwrap().mse < 1e-4);
    }

    #[test]
    fn zero_epochs_is_identity() {
        let f = random_backbone(5);
        let w = windows(20, 0.3, 6);
        let mut net = out_adapter(0.1, 7);
        let before = net.params.flat_values();
        let out = train_batch(&mut net, &f, &w, &w, &fast(0)).unwrap();
        assert_eq!(out.epochs_run, 0);
        assert_eq!(net.params.flat_values(), before);
        assert_eq!(evaluate(&net, &f, &w).unwrap(), evaluate_frozen(&f, &w).unwrap());
    }

    #[test]
    fn early_stopping_restores_best() {
        let f = constant_backbone(0.0);
        let train = windows(32, 1.0, 8);
        let val = windows(8, -1.0, 9);
        let mut net = out_adapter(0.1, 10);
        let cfg = TrainConfig { early_stop_patience: Some(2), ..fast(30) };
        let out = train_batch(&mut net, &f, &train, &val, &cfg).unwrap();
        assert!(out.early_stopped);
        assert_eq!(out.best_epoch, 1);
        let v = eval_loss(&net, &f, &val, &cfg).unwrap();
        assert_eq!(v, out.val_losses[0]);
    }

    #[test]
    fn deterministic_traces() {
        let f = random_backbone(11);
        let w = windows(40, 0.2, 12);
        let run = || {
            let mut net = out_adapter(0.1, 13);
            let out = train_batch(&mut net, &f, &w[..32], &w[32..], &fast(3)).unwrap();
            (out.trace, net.params.flat_values())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn descent_witness_has_no_violations() {
        let f = random_backbone(14);
        let w = windows(80, 0.5, 15);
        let mut net = out_adapter(0.1, 16);
        let cfg = TrainConfig { diagnostics: true, ..fast(5) };
        let out = train_batch(&mut net, &f, &w, &[], &cfg).unwrap();
        let wit = out.witness.unwrap();
        // the first batch sees the zero-initialized head, where d = 0
        assert_eq!(wit.batches.len(), 49);
        assert!(wit.batches_applicable() > 0);
        assert_eq!(wit.batch_violations(), 0);
        assert_eq!(wit.sample_violations, 0);
    }

    #[test]
    fn joint_gradient_reaches_input_adapter() {
        let f = random_backbone(17);
        let w = windows(8, 0.7, 18);
        let cfg = AdapterConfig { hidden_width: 8, ..AdapterConfig::new(Placement::Output, Form::Additive, 0.1) };
        let c = CompositeAdapter::from_config(&cfg, Form::Additive, shapes(), 19, false).unwrap();
        let refs: Vec<&Window> = w.iter().collect();
        let g = batch_gradients(&c, &f, &refs, &TrainConfig::default()).unwrap();
        assert!(g[0].iter().any(|v| *v != 0.0));
        assert!(g[1].iter().any(|v| *v != 0.0));
        let mut c2 = c.clone();
        assert!(train_joint(&mut c2, &f, &w, &[], &fast(1)).is_err());
        let jcfg = TrainConfig { joint: true, ..fast(2) };
        train_joint(&mut c2, &f, &w, &[], &jcfg).unwrap();
        assert_ne!(c2.input.params.flat_values(), c.input.params.flat_values());
    }

    fn stream(t: usize, seed: u64) -> ObservationStream {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = Tensor::new((0..t * 2).map(|_| rng.random_range(-1.0..1.0)).collect(), vec![t, 2]).unwrap();
        ObservationStream::new(rows, vec![0, 1], vec![1]).unwrap()
    }

    #[test]
    fn online_zero_lr_matches_frozen() {
        let f = random_backbone(20);
        let mut s = stream(60, 21);
        let mut net = out_adapter(0.1, 22);
        let cfg = TrainConfig { lr: 0.0, ..fast(1) };
        let log = run_online(&mut net, &f, &mut s, &cfg).unwrap();
        assert_eq!(log.steps.len(), 60 - (4 + 3 - 1));
        for st in &log.steps {
            assert_eq!(st.adapted_mse, st.frozen_mse);
            assert_eq!(st.max_read_index, st.t);
        }
        assert!(log.attestation.contains("max_read_index == clock"));
    }

    #[test]
    fn buffer_emits_lagged_sample() {
        let rows = Tensor::new((0..20).map(f64::from).collect(), vec![10, 2]).unwrap();
        let mut s = ObservationStream::new(rows, vec![0], vec![1]).unwrap();
        let mut b = StreamingBuffer::new(3, 2);
        for _ in 0..6 {
            b.observe(&mut s).unwrap();
        }
        assert_eq!(b.clock(), Some(5));
        let w = b.sample(&s).unwrap().unwrap();
        // input rows 1..=3 (column 0), labels rows 4..=5 (column 1)
        assert_eq!(w.x.data(), &[2.0, 4.0, 6.0]);
        assert_eq!(w.y.data(), &[9.0, 11.0]);
        assert_eq!(w.origin, 1);
        assert_eq!(s.max_read(), Some(5));
        assert!(check_leakage(Some(6), 5).is_err());
        assert!(check_leakage(Some(5), 5).is_ok());
    }

    #[test]
    fn online_rejects_short_stream() {
        let f = random_backbone(23);
        let mut s = stream(7, 24);
        let mut net = out_adapter(0.1, 25);
        assert!(run_online(&mut net, &f, &mut s, &fast(1)).is_err());
    }

    #[test]
    fn trace_file_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("trace.csv");
        let rows = vec![TraceRow {
            epoch_or_step: 1,
            split: "val".into(),
            loss: 0.5,
            mse: Some(0.5),
            mae: None,
            wall_ms: 0.0,
        }];
        write_trace(&p, &rows, &["# done".into()]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "epoch_or_step,split,loss,mse,mae,wall_ms\n1,val,0.5,0.5,,0\n# done\n");
    }

    #[test]
    fn unfrozen_copy_starts_at_the_backbone() {
        let s = shapes();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut t = |shape: &[usize]| {
            Tensor::new((0..shape.iter().product()).map(|_| rng.random_range(-0.5..0.5)).collect(), shape.to_vec())
                .unwrap()
        };
        let mlp =
            Forecaster::tiny_mlp(s, t(&[s.input_len(), 5]), t(&[5]), t(&[5, s.output_len()]), t(&[s.output_len()]))
                .unwrap();
        for f in [random_backbone(11), mlp] {
            let u = Unfrozen::new(&f).unwrap();
            for w in windows(10, 0.0, 13) {
                assert_eq!(u.predict(&f, &w.x).unwrap().data(), f.predict(&w.x).unwrap().data());
            }
            assert_eq!(u.forecaster().unwrap().checksum(), f.checksum());
        }
        let naive = Forecaster::seasonal_naive(s, 2, vec![0]).unwrap();
        assert!(matches!(Unfrozen::new(&naive), Err(Error::Unsupported(_))));
    }

    #[test]
    fn unfrozen_escapes_the_trust_region_and_leaves_the_original() {
        let f = constant_backbone(0.0);
        let before = f.checksum();
        let train = windows(64, 1.0, 1);
        let mut u = Unfrozen::new(&f).unwrap();
        train_batch(&mut u, &f, &train, &[], &fast(40)).unwrap();
        // a δ = 0.1 output adapter saturates at 0.81 here
        assert!(evaluate(&u, &f, &train).unwrap().mse < 1e-2);
        assert_eq!(f.checksum(), before);
        assert_ne!(u.forecaster().unwrap().checksum(), before);
    }
}
