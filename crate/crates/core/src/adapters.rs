//! Bounded edit networks at the input and output of a frozen forecaster.
//!
//! Every edit is `tanh`-squashed, so `‖A‖_∞ ≤ 1` and the per-entry change is
//! at most `δ` (additive form). Final layers start at zero, which makes each
//! adapter the identity map before training.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{xavier, Dense, Mlp, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::forecaster::{Forecaster, Shapes};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Input,
    Output,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Form {
    Additive,
    Multiplicative,
    Exp,
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Placement::Input => "input",
            Placement::Output => "output",
        })
    }
}

impl fmt::Display for Form {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Form::Additive => "additive",
            Form::Multiplicative => "multiplicative",
            Form::Exp => "exp",
        })
    }
}

impl FromStr for Form {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" | "additive" => Ok(Form::Additive),
            "mul" | "multiplicative" => Ok(Form::Multiplicative),
            "exp" => Ok(Form::Exp),
            other => Err(Error::Config(format!("unknown adapter form `{other}`"))),
        }
    }
}

impl FromStr for Placement {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "in" | "input" => Ok(Placement::Input),
            "out" | "output" => Ok(Placement::Output),
            other => Err(Error::Config(format!("unknown placement `{other}`"))),
        }
    }
}

/// Architecture and trust region of one adapter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    pub placement: Placement,
    pub form: Form,
    pub delta: f64,
    pub hidden_width: usize,
    /// Number of hidden tanh layers.
    pub depth: usize,
    /// Width `e` of the learned per-horizon embedding (output placement).
    pub embed_dim: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            placement: Placement::Output,
            form: Form::Additive,
            delta: 0.1,
            hidden_width: 128,
            depth: 2,
            embed_dim: 8,
        }
    }
}

impl AdapterConfig {
    pub fn new(placement: Placement, form: Form, delta: f64) -> Self {
        AdapterConfig { placement, form, delta, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(Error::Config(format!("delta {} must lie in (0, 1]", self.delta)));
        }
        if self.hidden_width == 0 || self.depth == 0 {
            return Err(Error::Config("adapter needs hidden_width ≥ 1 and depth ≥ 1".into()));
        }
        if self.placement == Placement::Output && self.form == Form::Exp {
            return Err(Error::Config("the exp form applies to input adapters only".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum Layout {
    /// `vec(X) → hidden… → Ld`.
    Input { net: Mlp },
    /// Trunk over `[vec(Ŷ), mean(X), last(X)]`, then a head shared across
    /// horizon rows fed `[trunk, embedding_h, Ŷ_h]`.
    Output { trunk: Mlp, embedding: usize, head: Dense },
}

/// A tiny bounded MLP edit network; its parameters never include `F`'s.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterNet {
    pub config: AdapterConfig,
    pub shapes: Shapes,
    pub params: ParamSet,
    layout: Layout,
}

/// What one edit did.
#[derive(Clone, Debug, PartialEq)]
pub struct EditRecord {
    pub placement: Placement,
    pub form: Form,
    pub delta: f64,
    /// The tanh-bounded network output `A`.
    pub raw_edit: Tensor,
    pub pre: Tensor,
    pub post: Tensor,
    /// `‖post − pre‖₂` for output edits; prediction drift for input edits
    /// once a backbone has been applied.
    pub drift_norm: Option<f64>,
}

impl AdapterNet {
    pub fn new(config: AdapterConfig, shapes: Shapes, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let hidden = vec![config.hidden_width; config.depth];
        let layout = match config.placement {
            Placement::Input => {
                let ld = shapes.input_len();
                let sizes: Vec<usize> = std::iter::once(ld).chain(hidden).chain([ld]).collect();
                Layout::Input { net: Mlp::build(&mut params, "input", &sizes, true, &mut rng) }
            }
            Placement::Output => {
                let cond = shapes.output_len() + 2 * shapes.covariates;
                let sizes: Vec<usize> = std::iter::once(cond).chain(hidden).collect();
                let trunk = Mlp::build(&mut params, "output.trunk", &sizes, false, &mut rng);
                let embedding = params.push(
                    "output.embedding",
                    xavier(shapes.horizon, config.embed_dim, &mut rng).reshape(&[shapes.horizon, config.embed_dim])?,
                );
                let fan_in = config.hidden_width + config.embed_dim + shapes.targets;
                let weight = params.push("output.head.weight", Tensor::zeros(&[fan_in, shapes.targets]));
                let bias = params.push("output.head.bias", Tensor::zeros(&[1, shapes.targets]));
                Layout::Output { trunk, embedding, head: Dense { weight, bias } }
            }
        };
        Ok(AdapterNet { config, shapes, params, layout })
    }

    pub fn placement(&self) -> Placement {
        self.config.placement
    }

    pub fn form(&self) -> Form {
        self.config.form
    }

    pub fn delta(&self) -> f64 {
        self.config.delta
    }

    /// The bounded edit `A`: `L×d` for input placement, `H×m` for output.
    ///
    /// `pre` is `X` (input) or `Ŷ` (output); `x` is the context the output
    /// adapter conditions on and is ignored for input placement.
    pub fn edit_on_tape(&self, tape: &mut Tape, vars: &[Var], pre: Var, x: Var) -> Result<Var> {
        match &self.layout {
            Layout::Input { net } => {
                let flat = tape.flatten(pre);
                let z = net.forward(tape, vars, flat)?;
                let a = tape.tanh(z);
                let [l, d] = self.shapes.input_shape();
                tape.reshape(a, &[l, d])
            }
            Layout::Output { trunk, embedding, head } => {
                let h = self.shapes.horizon;
                let cond = summary_features(tape, pre, x)?;
                let z = trunk.forward(tape, vars, cond)?;
                let feats = tape.tanh(z);
                let rows = tape.repeat_rows(feats, h)?;
                let input = tape.concat_cols(&[rows, vars[*embedding], pre])?;
                let o = tape.matmul(input, vars[head.weight])?;
                let o = tape.add_row(o, vars[head.bias])?;
                Ok(tape.tanh(o))
            }
        }
    }

    /// Applies the form: returns `(post, A)`.
    pub fn apply_on_tape(&self, tape: &mut Tape, vars: &[Var], pre: Var, x: Var) -> Result<(Var, Var)> {
        let a = self.edit_on_tape(tape, vars, pre, x)?;
        let da = tape.scale(a, self.config.delta);
        let post = match self.config.form {
            Form::Additive => tape.add(pre, da)?,
            Form::Multiplicative => {
                let factor = tape.offset(da, 1.0);
                tape.mul(pre, factor)?
            }
            Form::Exp => {
                let factor = tape.exp(da);
                tape.mul(pre, factor)?
            }
        };
        Ok((post, a))
    }

    fn apply_frozen(&self, pre: &Tensor, x: &Tensor) -> Result<EditRecord> {
        let mut tape = Tape::new();
        let vars = self.params.bind_frozen(&mut tape);
        let p = tape.constant(pre);
        let xv = tape.constant(x);
        let (post, a) = self.apply_on_tape(&mut tape, &vars, p, xv)?;
        let post = tape.value(post).clone();
        let drift = match self.config.placement {
            Placement::Output => Some(post.sub(pre)?.norm_l2()),
            Placement::Input => None,
        };
        Ok(EditRecord {
            placement: self.config.placement,
            form: self.config.form,
            delta: self.config.delta,
            raw_edit: tape.value(a).clone(),
            pre: pre.clone(),
            post,
            drift_norm: drift,
        })
    }
}

/// `X̃ = X + δA(X)`, `X⊙(1+δA(X))` or `X⊙exp(δA(X))`.
pub fn nudge_input(net: &AdapterNet, x: &Tensor) -> Result<(Tensor, EditRecord)> {
    if net.placement() != Placement::Input {
        return Err(Error::Config("nudge_input needs an input adapter".into()));
    }
    net.shapes.check_input(x)?;
    let rec = net.apply_frozen(x, x)?;
    Ok((rec.post.clone(), rec))
}

/// `Ỹ = Ŷ + δA(Ŷ, X)` or `Ŷ⊙(1+δA(Ŷ, X))`.
pub fn correct_output(net: &AdapterNet, y_hat: &Tensor, x: &Tensor) -> Result<(Tensor, EditRecord)> {
    if net.placement() != Placement::Output {
        return Err(Error::Config("correct_output needs an output adapter".into()));
    }
    net.shapes.check_input(x)?;
    if y_hat.shape() != net.shapes.output_shape() {
        return Err(Error::dim(
            "correct_output",
            format!("Ŷ {:?} vs expected {:?}", y_hat.shape(), net.shapes.output_shape()),
        ));
    }
    let rec = net.apply_frozen(y_hat, x)?;
    Ok((rec.post.clone(), rec))
}

/// Input nudge, frozen backbone, output correction; optionally with a
/// per-horizon sigmoid gate `γ` on the input path:
/// `Ỹ_h = Ŷ_h + γ_h(Ŷ′_h − Ŷ_h) + δ·d_h`.
#[derive(Clone, Debug, PartialEq)]
pub struct CompositeAdapter {
    pub input: AdapterNet,
    pub output: AdapterNet,
    /// One `1 × H` logit tensor when the gate is enabled.
    pub gate: Option<ParamSet>,
}

impl CompositeAdapter {
    pub fn new(input: AdapterNet, output: AdapterNet, gated: bool) -> Result<Self> {
        if input.placement() != Placement::Input || output.placement() != Placement::Output {
            return Err(Error::Config("composite needs an input and an output adapter".into()));
        }
        if input.shapes != output.shapes {
            return Err(Error::Config("composite adapters disagree on window shapes".into()));
        }
        let gate = gated.then(|| {
            let mut p = ParamSet::new();
            p.push("gate", Tensor::zeros(&[1, input.shapes.horizon]));
            p
        });
        Ok(CompositeAdapter { input, output, gate })
    }

    /// Builds both adapters from one config, sharing `δ`.
    pub fn from_config(cfg: &AdapterConfig, input_form: Form, shapes: Shapes, seed: u64, gated: bool) -> Result<Self> {
        let input = AdapterNet::new(
            AdapterConfig { placement: Placement::Input, form: input_form, ..cfg.clone() },
            shapes,
            seed,
        )?;
        let output = AdapterNet::new(
            AdapterConfig { placement: Placement::Output, ..cfg.clone() },
            shapes,
            seed.wrapping_add(1),
        )?;
        Self::new(input, output, gated)
    }

    /// Records the full pipeline; returns `(Ỹ, A_in, A_out)`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        f: &Forecaster,
        in_vars: &[Var],
        out_vars: &[Var],
        gate_vars: &[Var],
        x: Var,
    ) -> Result<(Var, Var, Var)> {
        let (x_tilde, a_in) = self.input.apply_on_tape(tape, in_vars, x, x)?;
        let y_prime = f.predict_on_tape(tape, x_tilde)?;
        let base = match (&self.gate, gate_vars.first()) {
            (Some(_), Some(&g)) => {
                let y_hat = f.predict_on_tape(tape, x)?;
                let gamma = tape.sigmoid(g);
                let gamma = tape.transpose(gamma);
                let cols = vec![gamma; self.input.shapes.targets];
                let gamma = tape.concat_cols(&cols)?;
                let diff = tape.sub(y_prime, y_hat)?;
                let step = tape.mul(gamma, diff)?;
                tape.add(y_hat, step)?
            }
            _ => y_prime,
        };
        let (y_tilde, a_out) = self.output.apply_on_tape(tape, out_vars, base, x)?;
        Ok((y_tilde, a_in, a_out))
    }
}

/// Conditioning row `[vec(Ŷ), column means of X, last row of X]`.
pub fn summary_features(tape: &mut Tape, y_hat: Var, x: Var) -> Result<Var> {
    let l = tape.value(x).rows();
    let y_flat = tape.flatten(y_hat);
    let col_sum = tape.sum_rows(x);
    let col_mean = tape.scale(col_sum, 1.0 / l as f64);
    let last = tape.slice_rows(x, l - 1, 1)?;
    tape.concat_cols(&[y_flat, col_mean, last])
}

/// Runs `X → nudge → F → correct` without gradients.
pub fn apply_composite(c: &CompositeAdapter, f: &Forecaster, x: &Tensor) -> Result<(Tensor, EditRecord, EditRecord)> {
    f.shapes().check_input(x)?;
    let mut tape = Tape::new();
    let iv = c.input.params.bind_frozen(&mut tape);
    let ov = c.output.params.bind_frozen(&mut tape);
    let gv = c.gate.as_ref().map(|g| g.bind_frozen(&mut tape)).unwrap_or_default();
    let xv = tape.constant(x);
    let (y, a_in, a_out) = c.forward_on_tape(&mut tape, f, &iv, &ov, &gv, xv)?;
    let y_tilde = tape.value(y).clone();
    let a_in = tape.value(a_in).clone();
    let a_out = tape.value(a_out).clone();

    let (x_tilde, mut rin) = nudge_input(&c.input, x)?;
    debug_assert_eq!(rin.raw_edit, a_in);
    let y_hat = f.predict(x)?;
    let y_prime = f.predict(&x_tilde)?;
    rin.drift_norm = Some(y_prime.sub(&y_hat)?.norm_l2());
    let base = y_tilde.sub(&a_out.map(|v| v * c.output.delta()))?;
    let rout = EditRecord {
        placement: Placement::Output,
        form: c.output.form(),
        delta: c.output.delta(),
        raw_edit: a_out,
        drift_norm: Some(y_tilde.sub(&base)?.norm_l2()),
        pre: base,
        post: y_tilde.clone(),
    };
    Ok((y_tilde, rin, rout))
}

/// Result of [`optimal_delta_closed_form`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimalStep {
    pub delta: f64,
    /// `false` when `E⟨r,g⟩ ≤ 0`: no positive step reduces the risk.
    pub improves: bool,
    pub mean_alignment: f64,
    pub mean_sq_norm: f64,
}

/// `δ* = mean⟨r_i, g_i⟩ / mean‖g_i‖²`, the minimizer of `½·mean‖r − δg‖²`.
pub fn optimal_delta_closed_form(r: &[Tensor], g: &[Tensor]) -> Result<OptimalStep> {
    if r.len() != g.len() || r.is_empty() {
        return Err(Error::dim("optimal_delta", format!("{} residuals vs {} corrections", r.len(), g.len())));
    }
    let n = r.len() as f64;
    let mut align = 0.0;
    let mut sq = 0.0;
    for (ri, gi) in r.iter().zip(g) {
        if ri.len() != gi.len() {
            return Err(Error::dim("optimal_delta", "residual/correction size mismatch"));
        }
        align += ri.dot(gi);
        sq += gi.dot(gi);
    }
    let (align, sq) = (align / n, sq / n);
    if sq == 0.0 {
        return Err(Error::UndefinedStep("all corrections are zero".into()));
    }
    let improves = align > 0.0;
    Ok(OptimalStep {
        delta: if improves { align / sq } else { 0.0 },
        improves,
        mean_alignment: align,
        mean_sq_norm: sq,
    })
}

/// Outcome of [`drift_bound_check`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftCheck {
    pub holds: bool,
    pub lhs: f64,
    pub rhs: f64,
    /// The entry-count bound `δ·L_F·√(Ld)` (additive form only).
    pub coarse_rhs: Option<f64>,
}

/// Compares the realized prediction drift of an input edit with its bound:
/// additive `δ·L_F·‖A‖`, exp `δ·e^δ·L_F·‖X‖_∞·‖A‖`, multiplicative
/// `δ·L_F·‖A⊙X‖` (the additive bound applied to the effective edit).
pub fn drift_bound_check(record: &EditRecord, f: &Forecaster, lipschitz: f64) -> Result<DriftCheck> {
    if record.placement != Placement::Input {
        return Err(Error::Config("drift bounds apply to input edits".into()));
    }
    let lhs = f.predict(&record.post)?.sub(&f.predict(&record.pre)?)?.norm_l2();
    let delta = record.delta;
    let a_norm = record.raw_edit.norm_l2();
    let (rhs, coarse) = match record.form {
        Form::Additive => {
            let ld = record.pre.len() as f64;
            (delta * lipschitz * a_norm, Some(delta * lipschitz * ld.sqrt()))
        }
        Form::Exp => (delta * delta.exp() * lipschitz * record.pre.norm_inf() * a_norm, None),
        Form::Multiplicative => {
            let ax: f64 =
                record.raw_edit.data().iter().zip(record.pre.data()).map(|(a, x)| (a * x).powi(2)).sum::<f64>().sqrt();
            (delta * lipschitz * ax, None)
        }
    };
    Ok(DriftCheck { holds: lhs <= rhs + 1e-9, lhs, rhs, coarse_rhs: coarse })
}

/// Builds an [`EditRecord`] for a given raw edit, bypassing the network.
pub fn edit_with(placement: Placement, form: Form, delta: f64, pre: &Tensor, raw_edit: &Tensor) -> Result<EditRecord> {
    if pre.shape() != raw_edit.shape() {
        return Err(Error::dim("edit_with", "edit and input shapes differ"));
    }
    if raw_edit.data().iter().any(|a| a.abs() > 1.0) {
        return Err(Error::Contract("raw edits must lie in [-1, 1]".into()));
    }
    let post: Vec<f64> = pre
        .data()
        .iter()
        .zip(raw_edit.data())
        .map(|(&p, &a)| match form {
            Form::Additive => p + delta * a,
            Form::Multiplicative => p * (1.0 + delta * a),
            Form::Exp => p * (delta * a).exp(),
        })
        .collect();
    let post = Tensor::new(post, pre.shape().to_vec())?;
    let drift = (placement == Placement::Output).then(|| post.sub(pre).map(|d| d.norm_l2())).transpose()?;
    Ok(EditRecord { placement, form, delta, raw_edit: raw_edit.clone(), pre: pre.clone(), post, drift_norm: drift })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn small(placement: Placement, form: Form) -> AdapterNet {
        let cfg = AdapterConfig { hidden_width: 16, ..AdapterConfig::new(placement, form, 0.1) };
        AdapterNet::new(cfg, Shapes::new(6, 2, 3, 2), 7).unwrap()
    }

    fn randomize(p: &mut ParamSet, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in p.tensors_mut() {
            for v in t.data_mut() {
                *v = rng.random_range(-scale..scale);
            }
        }
    }

    #[test]
    fn form_arithmetic() {
        let x = t(&[vec![1.0, 2.0]]);
        let r = edit_with(Placement::Input, Form::Additive, 0.1, &x, &t(&[vec![1.0, -1.0]])).unwrap();
        assert_eq!(r.post.data(), &[1.1, 1.9]);
        let r = edit_with(Placement::Input, Form::Multiplicative, 0.1, &t(&[vec![2.0]]), &t(&[vec![0.5]])).unwrap();
        assert!((r.post.item() - 2.1).abs() < 1e-15);
        let r = edit_with(Placement::Input, Form::Exp, 0.1, &t(&[vec![2.0]]), &t(&[vec![0.5]])).unwrap();
        assert!((r.post.item() - 2.10254).abs() < 1e-5);
        let r = edit_with(Placement::Output, Form::Additive, 0.1, &t(&[vec![3.0]]), &t(&[vec![-1.0]])).unwrap();
        assert_eq!(r.post.item(), 2.9);
        let r = edit_with(Placement::Output, Form::Multiplicative, 0.1, &t(&[vec![3.0]]), &t(&[vec![-1.0]])).unwrap();
        assert!((r.post.item() - 2.7).abs() < 1e-15);
    }

    #[test]
    fn zero_head_is_identity() {
        let x = Tensor::new((0..12).map(|i| i as f64 * 0.3 - 1.0).collect(), vec![6, 2]).unwrap();
        let y = Tensor::new((0..6).map(|i| i as f64).collect(), vec![3, 2]).unwrap();
        for form in [Form::Additive, Form::Multiplicative] {
            let (y2, rec) = correct_output(&small(Placement::Output, form), &y, &x).unwrap();
            assert_eq!(y2, y);
            assert_eq!(rec.drift_norm, Some(0.0));
        }
        for form in [Form::Additive, Form::Multiplicative, Form::Exp] {
            let (x2, _) = nudge_input(&small(Placement::Input, form), &x).unwrap();
            assert_eq!(x2, x);
        }
    }

    #[test]
    fn edits_stay_bounded() {
        let mut net = small(Placement::Output, Form::Additive);
        randomize(&mut net.params, 3, 50.0);
        let x = Tensor::filled(&[6, 2], 4.0);
        let y = Tensor::filled(&[3, 2], -7.0);
        let (y2, rec) = correct_output(&net, &y, &x).unwrap();
        assert!(rec.raw_edit.data().iter().all(|a| a.abs() <= 1.0));
        let max_change = y2.sub(&y).unwrap().norm_inf();
        assert!(max_change <= 0.1 + 1e-15);
        let expect: Vec<f64> = y.data().iter().zip(rec.raw_edit.data()).map(|(p, a)| p + 0.1 * a).collect();
        assert_eq!(rec.post.data(), expect.as_slice());
    }

    #[test]
    fn exp_form_keeps_positivity() {
        let mut net = small(Placement::Input, Form::Exp);
        randomize(&mut net.params, 5, 20.0);
        let x = Tensor::new((0..12).map(|i| 0.01 + i as f64).collect(), vec![6, 2]).unwrap();
        let (x2, _) = nudge_input(&net, &x).unwrap();
        assert!(x2.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn delta_must_be_in_unit_interval() {
        for bad in [0.0, -0.1, 1.5, f64::NAN] {
            let cfg = AdapterConfig::new(Placement::Output, Form::Additive, bad);
            assert!(matches!(AdapterNet::new(cfg, Shapes::new(2, 1, 1, 1), 0), Err(Error::Config(_))));
        }
        assert!(AdapterNet::new(
            AdapterConfig::new(Placement::Output, Form::Additive, 1.0),
            Shapes::new(2, 1, 1, 1),
            0
        )
        .is_ok());
    }

    #[test]
    fn wrong_placement_rejected() {
        let x = Tensor::zeros(&[6, 2]);
        assert!(nudge_input(&small(Placement::Output, Form::Additive), &x).is_err());
        assert!(correct_output(&small(Placement::Input, Form::Additive), &Tensor::zeros(&[3, 2]), &x).is_err());
    }

    #[test]
    fn closed_form_examples() {
        let r = vec![Tensor::scalar(1.0)];
        let g = vec![Tensor::scalar(0.5)];
        assert_eq!(optimal_delta_closed_form(&r, &g).unwrap().delta, 2.0);
        let rs: Vec<Tensor> = (0..5).map(|i| Tensor::vector(vec![i as f64, 1.0, -2.0]).unwrap()).collect();
        assert_eq!(optimal_delta_closed_form(&rs, &rs).unwrap().delta, 1.0);
        let z = vec![Tensor::zeros(&[1, 3]); 5];
        assert!(matches!(optimal_delta_closed_form(&rs, &z), Err(Error::UndefinedStep(_))));
        let neg: Vec<Tensor> = rs.iter().map(|t| t.map(|v| -v)).collect();
        let s = optimal_delta_closed_form(&rs, &neg).unwrap();
        assert!(!s.improves);
        assert_eq!(s.delta, 0.0);
    }

    #[test]
    fn drift_examples() {
        // F(x) = 2x on R^9 and u = 1 everywhere, so ‖u‖ = 3
        let shapes = Shapes::new(3, 3, 3, 3);
        let mut w = Tensor::zeros(&[9, 9]);
        for i in 0..9 {
            w.data_mut()[i * 9 + i] = 2.0;
        }
        let two = Forecaster::linear(shapes, w, Tensor::zeros(&[1, 9])).unwrap();
        let x = Tensor::new((0..9).map(|i| 0.3 * i as f64 - 1.0).collect(), vec![3, 3]).unwrap();
        let rec = edit_with(Placement::Input, Form::Additive, 0.1, &x, &Tensor::filled(&[3, 3], 1.0)).unwrap();
        let c = drift_bound_check(&rec, &two, 2.0).unwrap();
        assert!(c.holds);
        assert!((c.lhs - 0.6).abs() < 1e-12 && (c.rhs - 0.6).abs() < 1e-12, "{c:?}");

        let rec = edit_with(Placement::Input, Form::Additive, 0.1, &x, &Tensor::zeros(&[3, 3])).unwrap();
        let c = drift_bound_check(&rec, &two, 2.0).unwrap();
        assert_eq!((c.lhs, c.rhs, c.holds), (0.0, 0.0, true));

        let ident = Forecaster::linear(Shapes::new(1, 1, 1, 1), Tensor::scalar(1.0), Tensor::scalar(0.0)).unwrap();
        let rec = edit_with(Placement::Input, Form::Exp, 0.1, &Tensor::scalar(1.0), &Tensor::scalar(1.0)).unwrap();
        let c = drift_bound_check(&rec, &ident, 1.0).unwrap();
        assert!((c.lhs - (0.1f64.exp() - 1.0)).abs() < 1e-15);
        assert!((c.rhs - 0.1 * 0.1f64.exp()).abs() < 1e-15);
        assert!(c.holds);
    }

    #[test]
    fn composite_identity_and_output_shift() {
        let shapes = Shapes::new(6, 2, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Tensor::new((0..72).map(|_| rng.random_range(-0.5..0.5)).collect(), vec![6, 12]).unwrap();
        let f = Forecaster::linear(shapes, w, Tensor::filled(&[1, 6], 0.2)).unwrap();
        let cfg = AdapterConfig { hidden_width: 8, ..AdapterConfig::default() };
        let mut c = CompositeAdapter::from_config(&cfg, Form::Additive, shapes, 3, false).unwrap();
        let x = Tensor::new((0..12).map(|_| rng.random_range(-2.0..2.0)).collect(), vec![6, 2]).unwrap();
        let (y, rin, rout) = apply_composite(&c, &f, &x).unwrap();
        assert_eq!(y, f.predict(&x).unwrap());
        assert_eq!(rin.drift_norm, Some(0.0));
        assert_eq!(rout.drift_norm, Some(0.0));

        // head bias atanh(1)→∞ is unreachable; a bias giving A = tanh(b) shows the shift
        let b = c.output.params.names().iter().position(|n| n == "output.head.bias").unwrap();
        c.output.params.tensors_mut()[b].data_mut().fill(0.5f64.atanh());
        let (y, _, _) = apply_composite(&c, &f, &x).unwrap();
        let base = f.predict(&x).unwrap();
        for (a, b) in y.data().iter().zip(base.data()) {
            assert!((a - b - 0.05).abs() < 1e-14);
        }
    }
}
