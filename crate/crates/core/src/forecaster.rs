//! Frozen backbones `F: R^{L×d} → R^{H×m}`.
//!
//! Parameters are private and only set at construction; nothing in the crate
//! can mutate a [`Forecaster`] after it is built. Differentiable kinds record
//! their forward pass on a [`Tape`] with parameters as constants, so gradients
//! reach the input but never the parameters.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamState, Mlp, ParamSet, Tape, Tensor, Var};
use crate::data::Window;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    LinearAr,
    SeasonalNaive,
    TinyMlp,
    Blackbox,
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            BackboneKind::LinearAr => "linear_ar",
            BackboneKind::SeasonalNaive => "seasonal_naive",
            BackboneKind::TinyMlp => "tiny_mlp",
            BackboneKind::Blackbox => "blackbox",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for BackboneKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear_ar" => Ok(BackboneKind::LinearAr),
            "seasonal_naive" => Ok(BackboneKind::SeasonalNaive),
            "tiny_mlp" => Ok(BackboneKind::TinyMlp),
            "blackbox" => Ok(BackboneKind::Blackbox),
            other => Err(Error::Config(format!("unknown backbone kind `{other}`"))),
        }
    }
}

/// Window geometry: lookback `L`, covariates `d`, horizon `H`, targets `m`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shapes {
    #[serde(rename = "L")]
    pub lookback: usize,
    #[serde(rename = "d")]
    pub covariates: usize,
    #[serde(rename = "H")]
    pub horizon: usize,
    #[serde(rename = "m")]
    pub targets: usize,
}

impl Shapes {
    pub fn new(lookback: usize, covariates: usize, horizon: usize, targets: usize) -> Self {
        Shapes { lookback, covariates, horizon, targets }
    }

    pub fn input_len(&self) -> usize {
        self.lookback * self.covariates
    }

    pub fn output_len(&self) -> usize {
        self.horizon * self.targets
    }

    pub fn input_shape(&self) -> [usize; 2] {
        [self.lookback, self.covariates]
    }

    pub fn output_shape(&self) -> [usize; 2] {
        [self.horizon, self.targets]
    }

    pub(crate) fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.input_shape() {
            return Err(Error::dim(
                "forecaster input",
                format!("expected {:?}, got {:?}", self.input_shape(), x.shape()),
            ));
        }
        Ok(())
    }
}

pub type BlackboxFn = dyn Fn(&Tensor) -> Result<Tensor> + Send + Sync;

#[derive(Clone)]
pub(crate) enum Params {
    LinearAr {
        /// `Hm × Ld`
        weight: Tensor,
        /// `Ld × Hm`, cached for row-major forward passes
        weight_t: Tensor,
        /// `1 × Hm`
        bias: Tensor,
    },
    SeasonalNaive {
        period: usize,
        target_cols: Vec<usize>,
        /// `H × L` row selection
        rows: Tensor,
        /// `d × m` column selection
        cols: Tensor,
    },
    TinyMlp {
        /// `Ld × hidden`
        w1: Tensor,
        b1: Tensor,
        /// `hidden × Hm`
        w2: Tensor,
        b2: Tensor,
    },
    Blackbox(Arc<BlackboxFn>),
}

/// How Jacobian-vector products are evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JacobianProduct {
    pub mode: JacobianMode,
    pub fd_step: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianMode {
    Exact,
    FiniteDifference,
}

impl Default for JacobianProduct {
    fn default() -> Self {
        JacobianProduct { mode: JacobianMode::Exact, fd_step: 1e-5 }
    }
}

impl JacobianProduct {
    pub fn finite_difference() -> Self {
        JacobianProduct { mode: JacobianMode::FiniteDifference, ..Self::default() }
    }
}

/// Lipschitz constant of a backbone.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorNorm {
    pub value: f64,
    /// `true` when sampled from local Jacobians rather than exact.
    pub estimate: bool,
}

/// Options for [`fit_backbone`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub ridge_lambda: f64,
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Seasonal period; defaults to `H` (clamped to `L`).
    pub period: Option<usize>,
    /// Covariate columns that hold the targets; defaults to the last `m`.
    pub target_cols: Option<Vec<usize>>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { ridge_lambda: 1e-3, hidden: 32, epochs: 200, lr: 1e-2, seed: 0, period: None, target_cols: None }
    }
}

/// A frozen forecaster.
#[derive(Clone)]
pub struct Forecaster {
    kind: BackboneKind,
    shapes: Shapes,
    lipschitz_hint: Option<f64>,
    params: Params,
    fit_config: Option<FitConfig>,
}

impl fmt::Debug for Forecaster {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Forecaster")
            .field("kind", &self.kind)
            .field("shapes", &self.shapes)
            .field("lipschitz_hint", &self.lipschitz_hint)
            .finish_non_exhaustive()
    }
}

impl Forecaster {
    /// Affine backbone `vec(Ŷ) = W·vec(X) + b` with `W: Hm × Ld`.
    pub fn linear(shapes: Shapes, weight: Tensor, bias: Tensor) -> Result<Self> {
        let (hm, ld) = (shapes.output_len(), shapes.input_len());
        if weight.len() != hm * ld || bias.len() != hm {
            return Err(Error::dim(
                "linear_ar",
                format!("weight {:?} / bias {:?} do not match Hm={hm}, Ld={ld}", weight.shape(), bias.shape()),
            ));
        }
        let weight = weight.reshape(&[hm, ld])?;
        let weight_t = weight.transpose();
        let bias = bias.reshape(&[1, hm])?;
        let l_f = spectral_norm(&weight);
        Ok(Forecaster {
            kind: BackboneKind::LinearAr,
            shapes,
            lipschitz_hint: Some(l_f),
            params: Params::LinearAr { weight, weight_t, bias },
            fit_config: None,
        })
    }

    /// `Ŷ[h, k] = X[L − p + (h mod p), target_cols[k]]`.
    pub fn seasonal_naive(shapes: Shapes, period: usize, target_cols: Vec<usize>) -> Result<Self> {
        let (l, d, h, m) = (shapes.lookback, shapes.covariates, shapes.horizon, shapes.targets);
        if period == 0 || period > l {
            return Err(Error::Config(format!("seasonal period {period} must be in 1..={l}")));
        }
        if target_cols.len() != m || target_cols.iter().any(|&c| c >= d) {
            return Err(Error::Config(format!("target columns {target_cols:?} invalid for d={d}, m={m}")));
        }
        let mut rows = vec![0.0; h * l];
        for hh in 0..h {
            rows[hh * l + (l - period + hh % period)] = 1.0;
        }
        let mut cols = vec![0.0; d * m];
        for (k, &c) in target_cols.iter().enumerate() {
            cols[c * m + k] = 1.0;
        }
        let mut f = Forecaster {
            kind: BackboneKind::SeasonalNaive,
            shapes,
            lipschitz_hint: None,
            params: Params::SeasonalNaive {
                period,
                target_cols,
                rows: Tensor::from_parts(rows, vec![h, l]),
                cols: Tensor::from_parts(cols, vec![d, m]),
            },
            fit_config: None,
        };
        f.lipschitz_hint = Some(spectral_norm(&f.jacobian_matrix(&Tensor::zeros(&shapes.input_shape()))?));
        Ok(f)
    }

    /// One-hidden-layer tanh network on `vec(X)`.
    pub fn tiny_mlp(shapes: Shapes, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Result<Self> {
        let (ld, hm) = (shapes.input_len(), shapes.output_len());
        let hidden = b1.len();
        if w1.len() != ld * hidden || w2.len() != hidden * hm || b2.len() != hm {
            return Err(Error::dim("tiny_mlp", "parameter shapes do not match window geometry"));
        }
        let w1 = w1.reshape(&[ld, hidden])?;
        let w2 = w2.reshape(&[hidden, hm])?;
        let bound = spectral_norm(&w1) * spectral_norm(&w2);
        Ok(Forecaster {
            kind: BackboneKind::TinyMlp,
            shapes,
            lipschitz_hint: Some(bound),
            params: Params::TinyMlp { w1, b1: b1.reshape(&[1, hidden])?, w2, b2: b2.reshape(&[1, hm])? },
            fit_config: None,
        })
    }

    /// Opaque callable; Jacobians only via finite differences.
    pub fn blackbox(
        shapes: Shapes,
        lipschitz_hint: Option<f64>,
        f: impl Fn(&Tensor) -> Result<Tensor> + Send + Sync + 'static,
    ) -> Self {
        Forecaster {
            kind: BackboneKind::Blackbox,
            shapes,
            lipschitz_hint,
            params: Params::Blackbox(Arc::new(f)),
            fit_config: None,
        }
    }

    pub fn kind(&self) -> BackboneKind {
        self.kind
    }

    pub fn shapes(&self) -> Shapes {
        self.shapes
    }

    pub fn lipschitz_hint(&self) -> Option<f64> {
        self.lipschitz_hint
    }

    pub fn fit_config(&self) -> Option<&FitConfig> {
        self.fit_config.as_ref()
    }

    pub fn is_differentiable(&self) -> bool {
        self.kind != BackboneKind::Blackbox
    }

    /// Named frozen parameter arrays (empty for blackbox).
    pub fn param_arrays(&self) -> Vec<(&'static str, &Tensor)> {
        match &self.params {
            Params::LinearAr { weight, bias, .. } => vec![("weight", weight), ("bias", bias)],
            Params::SeasonalNaive { rows, cols, .. } => vec![("rows", rows), ("cols", cols)],
            Params::TinyMlp { w1, b1, w2, b2 } => {
                vec![("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2)]
            }
            Params::Blackbox(_) => Vec::new(),
        }
    }

    pub fn seasonal_period(&self) -> Option<(usize, &[usize])> {
        match &self.params {
            Params::SeasonalNaive { period, target_cols, .. } => Some((*period, target_cols)),
            _ => None,
        }
    }

    /// SHA-256 over kind, shapes and every parameter byte.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.kind.to_string().as_bytes());
        for s in [self.shapes.lookback, self.shapes.covariates, self.shapes.horizon, self.shapes.targets] {
            h.update((s as u64).to_le_bytes());
        }
        if let Some((p, cols)) = self.seasonal_period() {
            h.update((p as u64).to_le_bytes());
            for c in cols {
                h.update((*c as u64).to_le_bytes());
            }
        }
        for (name, t) in self.param_arrays() {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub(crate) fn with_fit_config(mut self, cfg: FitConfig) -> Self {
        self.fit_config = Some(cfg);
        self
    }

    /// `Ŷ = F(X)`.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.shapes.check_input(x)?;
        let [h, m] = self.shapes.output_shape();
        let out = match &self.params {
            Params::LinearAr { weight_t, bias, .. } => {
                let flat = x.reshape(&[1, self.shapes.input_len()])?;
                flat.matmul(weight_t)?.add(bias)?
            }
            Params::SeasonalNaive { rows, cols, .. } => rows.matmul(x)?.matmul(cols)?,
            Params::TinyMlp { w1, b1, w2, b2 } => {
                let flat = x.reshape(&[1, self.shapes.input_len()])?;
                let hid = flat.matmul(w1)?.add(b1)?.map(f64::tanh);
                hid.matmul(w2)?.add(b2)?
            }
            Params::Blackbox(f) => {
                let y = f(x).map_err(|e| Error::Backbone(e.to_string()))?;
                if y.len() != h * m {
                    return Err(Error::Backbone(format!(
                        "blackbox returned shape {:?}, expected [{h}, {m}]",
                        y.shape()
                    )));
                }
                if !y.all_finite() {
                    return Err(Error::Backbone("blackbox returned non-finite values".into()));
                }
                y
            }
        };
        out.reshape(&[h, m])
    }

    /// Records `F(x)` on the tape. Parameters enter as constants.
    ///
    /// A blackbox backbone is evaluated as a constant, which is only allowed
    /// when `x` does not require a gradient.
    pub fn predict_on_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.shapes.check_input(tape.value(x))?;
        let [h, m] = self.shapes.output_shape();
        let ld = self.shapes.input_len();
        match &self.params {
            Params::LinearAr { weight_t, bias, .. } => {
                let flat = tape.reshape(x, &[1, ld])?;
                let w = tape.constant(weight_t);
                let b = tape.constant(bias);
                let z = tape.matmul(flat, w)?;
                let y = tape.add(z, b)?;
                tape.reshape(y, &[h, m])
            }
            Params::SeasonalNaive { rows, cols, .. } => {
                let r = tape.constant(rows);
                let c = tape.constant(cols);
                let sel = tape.matmul(r, x)?;
                tape.matmul(sel, c)
            }
            Params::TinyMlp { w1, b1, w2, b2 } => {
                let flat = tape.reshape(x, &[1, ld])?;
                let (w1, b1, w2, b2) = (tape.constant(w1), tape.constant(b1), tape.constant(w2), tape.constant(b2));
                let z = tape.matmul(flat, w1)?;
                let z = tape.add(z, b1)?;
                let a = tape.tanh(z);
                let o = tape.matmul(a, w2)?;
                let o = tape.add(o, b2)?;
                tape.reshape(o, &[h, m])
            }
            Params::Blackbox(_) => {
                if tape.requires_grad(x) {
                    return Err(Error::Unsupported("gradients cannot flow through a blackbox backbone".into()));
                }
                let y = self.predict(tape.value(x))?;
                Ok(tape.constant(&y))
            }
        }
    }

    /// `J_F(X)·v`.
    pub fn jvp(&self, x: &Tensor, v: &Tensor, how: JacobianProduct) -> Result<Tensor> {
        self.shapes.check_input(x)?;
        if v.shape() != x.shape() {
            return Err(Error::dim("jvp", format!("v {:?} vs X {:?}", v.shape(), x.shape())));
        }
        let [h, m] = self.shapes.output_shape();
        let exact = how.mode == JacobianMode::Exact && self.is_differentiable();
        if !exact {
            let step = how.fd_step;
            let plus = x.add(&v.map(|e| e * step))?;
            let minus = x.sub(&v.map(|e| e * step))?;
            let diff = self.predict(&plus)?.sub(&self.predict(&minus)?)?;
            return Ok(diff.map(|e| e / (2.0 * step)));
        }
        let ld = self.shapes.input_len();
        let out = match &self.params {
            Params::LinearAr { weight_t, .. } => v.reshape(&[1, ld])?.matmul(weight_t)?,
            Params::SeasonalNaive { rows, cols, .. } => rows.matmul(v)?.matmul(cols)?,
            Params::TinyMlp { w1, b1, w2, .. } => {
                let hid = x.reshape(&[1, ld])?.matmul(w1)?.add(b1)?.map(f64::tanh);
                let dz = v.reshape(&[1, ld])?.matmul(w1)?;
                let gated = Tensor::from_parts(
                    dz.data().iter().zip(hid.data()).map(|(d, a)| d * (1.0 - a * a)).collect(),
                    dz.shape().to_vec(),
                );
                gated.matmul(w2)?
            }
            Params::Blackbox(_) => unreachable!("handled by the finite-difference branch"),
        };
        out.reshape(&[h, m])
    }

    /// Dense input Jacobian `∂vec(Ŷ)/∂vec(X)` of shape `Hm × Ld`.
    pub fn jacobian_matrix(&self, x: &Tensor) -> Result<Tensor> {
        let (ld, hm) = (self.shapes.input_len(), self.shapes.output_len());
        let mut jac = vec![0.0; hm * ld];
        let how = JacobianProduct::default();
        for j in 0..ld {
            let mut e = vec![0.0; ld];
            e[j] = 1.0;
            let col = self.jvp(x, &Tensor::from_parts(e, x.shape().to_vec()), how)?;
            for (i, v) in col.data().iter().enumerate() {
                jac[i * ld + j] = *v;
            }
        }
        Ok(Tensor::from_parts(jac, vec![hm, ld]))
    }

    /// Lipschitz constant `L_F` in the Euclidean norm.
    ///
    /// Exact for the affine kinds; for `tiny_mlp` the maximum local Jacobian
    /// norm over 32 standard-normal sample points, estimated by power iteration.
    pub fn operator_norm(&self) -> Result<OperatorNorm> {
        match &self.params {
            Params::LinearAr { weight, .. } => Ok(OperatorNorm { value: spectral_norm(weight), estimate: false }),
            Params::SeasonalNaive { .. } => Ok(OperatorNorm {
                value: spectral_norm(&self.jacobian_matrix(&Tensor::zeros(&self.shapes.input_shape()))?),
                estimate: false,
            }),
            Params::TinyMlp { .. } => {
                let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
                let shape = self.shapes.input_shape();
                let mut best: f64 = 0.0;
                for _ in 0..32 {
                    let x = Tensor::from_parts(
                        (0..self.shapes.input_len()).map(|_| StandardNormal.sample(&mut rng)).collect(),
                        shape.to_vec(),
                    );
                    let jac = self.jacobian_matrix(&x)?;
                    best = best.max(power_iteration_norm(&jac, 200));
                }
                Ok(OperatorNorm { value: best, estimate: true })
            }
            Params::Blackbox(_) => Err(Error::Unsupported("operator norm of a blackbox backbone".into())),
        }
    }
}

/// Largest singular value.
pub fn spectral_norm(m: &Tensor) -> f64 {
    let (r, c) = (m.rows(), m.cols());
    if r == 0 || c == 0 {
        return 0.0;
    }
    let mat = DMatrix::from_row_slice(r, c, m.data());
    mat.singular_values().iter().fold(0.0f64, |a, &b| a.max(b))
}

/// `‖J‖₂` by power iteration on `JᵀJ`.
fn power_iteration_norm(jac: &Tensor, iters: usize) -> f64 {
    let (r, c) = (jac.rows(), jac.cols());
    let mut v = vec![1.0 / (c as f64).sqrt(); c];
    let mut sigma = 0.0;
    for _ in 0..iters {
        let jv: Vec<f64> = (0..r).map(|i| (0..c).map(|j| jac.get(i, j) * v[j]).sum()).collect();
        let mut jtjv: Vec<f64> = (0..c).map(|j| (0..r).map(|i| jac.get(i, j) * jv[i]).sum()).collect();
        let n = jtjv.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return 0.0;
        }
        for x in &mut jtjv {
            *x /= n;
        }
        v = jtjv;
        sigma = n.sqrt();
    }
    sigma
}

/// Fits and freezes a built-in backbone on training windows.
pub fn fit_backbone(kind: BackboneKind, windows: &[Window], cfg: &FitConfig) -> Result<Forecaster> {
    let first = windows.first().ok_or_else(|| Error::Data("fit_backbone needs at least one window".into()))?;
    let shapes = Shapes::new(first.x.rows(), first.x.cols(), first.y.rows(), first.y.cols());
    if windows.iter().any(|w| w.x.shape() != first.x.shape() || w.y.shape() != first.y.shape()) {
        return Err(Error::Data("windows have inconsistent shapes".into()));
    }
    let f = match kind {
        BackboneKind::LinearAr => fit_ridge(shapes, windows, cfg.ridge_lambda)?,
        BackboneKind::SeasonalNaive => {
            let period = cfg.period.unwrap_or(shapes.horizon).min(shapes.lookback);
            let cols = cfg
                .target_cols
                .clone()
                .unwrap_or_else(|| (shapes.covariates.saturating_sub(shapes.targets)..shapes.covariates).collect());
            Forecaster::seasonal_naive(shapes, period, cols)?
        }
        BackboneKind::TinyMlp => fit_mlp(shapes, windows, cfg)?,
        BackboneKind::Blackbox => return Err(Error::Config("a blackbox backbone cannot be fitted".into())),
    };
    Ok(f.with_fit_config(cfg.clone()))
}

fn fit_ridge(shapes: Shapes, windows: &[Window], lambda: f64) -> Result<Forecaster> {
    let (ld, hm) = (shapes.input_len(), shapes.output_len());
    let p = ld + 1;
    // normal equations with an unpenalized intercept
    let mut gram = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DMatrix::<f64>::zeros(p, hm);
    let mut z = vec![0.0; p];
    for w in windows {
        z[..ld].copy_from_slice(w.x.data());
        z[ld] = 1.0;
        for i in 0..p {
            let zi = z[i];
            if zi == 0.0 {
                continue;
            }
            for j in i..p {
                gram[(i, j)] += zi * z[j];
            }
            for (k, y) in w.y.data().iter().enumerate() {
                rhs[(i, k)] += zi * y;
            }
        }
    }
    for i in 0..p {
        for j in 0..i {
            gram[(i, j)] = gram[(j, i)];
        }
    }
    for i in 0..ld {
        gram[(i, i)] += lambda;
    }
    let coef = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => {
            log::warn!("ridge normal equations are singular; falling back to the pseudo-inverse");
            let pinv = gram.pseudo_inverse(1e-12).map_err(|e| Error::Data(format!("pseudo-inverse failed: {e}")))?;
            pinv * rhs
        }
    };
    // coef is p × Hm: rows 0..ld are Wᵀ, row ld is the intercept
    let mut weight = vec![0.0; hm * ld];
    for k in 0..hm {
        for j in 0..ld {
            weight[k * ld + j] = coef[(j, k)];
        }
    }
    let bias: Vec<f64> = (0..hm).map(|k| coef[(ld, k)]).collect();
    Forecaster::linear(shapes, Tensor::new(weight, vec![hm, ld])?, Tensor::new(bias, vec![1, hm])?)
}

fn fit_mlp(shapes: Shapes, windows: &[Window], cfg: &FitConfig) -> Result<Forecaster> {
    let (ld, hm) = (shapes.input_len(), shapes.output_len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamSet::new();
    let mlp = Mlp::build(&mut params, "backbone", &[ld, cfg.hidden, hm], false, &mut rng);
    let mut adam = AdamState::new(&params, cfg.lr);
    let xs = Tensor::new(windows.iter().flat_map(|w| w.x.data().iter().copied()).collect(), vec![windows.len(), ld])?;
    let ys = Tensor::new(windows.iter().flat_map(|w| w.y.data().iter().copied()).collect(), vec![windows.len(), hm])?;
    let mut tape = Tape::new();
    for _ in 0..cfg.epochs {
        let vars = params.bind(&mut tape);
        let x = tape.constant(&xs);
        let y = tape.constant(&ys);
        let pred = mlp.forward(&mut tape, &vars, x)?;
        let err = tape.sub(pred, y)?;
        let sq = tape.square(err);
        let loss = tape.mean(sq);
        let grads = tape.backward(loss)?;
        params.absorb(&grads, &vars);
        adam_step(&mut params, &mut adam)?;
    }
    let t = params.tensors();
    Forecaster::tiny_mlp(shapes, t[0].clone(), t[1].clone(), t[2].clone(), t[3].clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn window(x: Tensor, y: Tensor) -> Window {
        Window { x, y, origin: 0 }
    }

    #[test]
    fn seasonal_naive_definition() {
        let shapes = Shapes::new(6, 2, 5, 1);
        let f = Forecaster::seasonal_naive(shapes, 3, vec![1]).unwrap();
        let x = Tensor::new((0..12).map(f64::from).collect(), vec![6, 2]).unwrap();
        let y = f.predict(&x).unwrap();
        // h (1-based) → row L−p+((h−1) mod p) = 3,4,5,3,4 ; column 1
        let expect: Vec<f64> = [3, 4, 5, 3, 4].iter().map(|&r| x.get(r, 1)).collect();
        assert_eq!(y.data(), expect.as_slice());
        assert_eq!(y.shape(), &[5, 1]);
    }

    #[test]
    fn mean_pool_linear_keeps_constants() {
        let shapes = Shapes::new(4, 1, 2, 1);
        let w = Tensor::filled(&[2, 4], 0.25);
        let f = Forecaster::linear(shapes, w, Tensor::zeros(&[1, 2])).unwrap();
        let y = f.predict(&Tensor::filled(&[4, 1], 3.5)).unwrap();
        assert_eq!(y.data(), &[3.5, 3.5]);
    }

    #[test]
    fn zero_weight_mlp_outputs_bias() {
        let shapes = Shapes::new(3, 2, 2, 2);
        let f = Forecaster::tiny_mlp(
            shapes,
            Tensor::zeros(&[6, 4]),
            Tensor::zeros(&[1, 4]),
            Tensor::zeros(&[4, 4]),
            Tensor::vector(vec![1.0, -2.0, 0.5, 3.0]).unwrap(),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let x = Tensor::new((0..6).map(|_| rng.random_range(-5.0..5.0)).collect(), vec![3, 2]).unwrap();
            assert_eq!(f.predict(&x).unwrap().data(), &[1.0, -2.0, 0.5, 3.0]);
        }
    }

    #[test]
    fn shape_mismatch_and_blackbox_failure() {
        let f = Forecaster::seasonal_naive(Shapes::new(4, 1, 2, 1), 2, vec![0]).unwrap();
        assert!(matches!(f.predict(&Tensor::zeros(&[3, 1])), Err(Error::Dimension { .. })));
        let bb = Forecaster::blackbox(Shapes::new(2, 1, 1, 1), None, |_| Err(Error::Backbone("boom".into())));
        assert!(matches!(bb.predict(&Tensor::zeros(&[2, 1])), Err(Error::Backbone(_))));
    }

    #[test]
    fn ridge_recovers_known_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w_true: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w_true = Tensor::new(w_true, vec![2, 6]).unwrap();
        let windows: Vec<Window> = (0..80)
            .map(|_| {
                let x = Tensor::new((0..6).map(|_| rng.random_range(-1.0..1.0)).collect(), vec![3, 2]).unwrap();
                let y = w_true.matmul(&x.reshape(&[6, 1]).unwrap()).unwrap().reshape(&[2, 1]).unwrap();
                window(x, y)
            })
            .collect();
        let cfg = FitConfig { ridge_lambda: 1e-12, ..FitConfig::default() };
        let f = fit_backbone(BackboneKind::LinearAr, &windows, &cfg).unwrap();
        let (_, w) = f.param_arrays()[0];
        for (a, b) in w.data().iter().zip(w_true.data()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn ridge_single_constant_window() {
        let x = Tensor::filled(&[3, 1], 2.0);
        let y = Tensor::filled(&[2, 1], 2.0);
        let f = fit_backbone(BackboneKind::LinearAr, &[window(x.clone(), y)], &FitConfig::default()).unwrap();
        for v in f.predict(&x).unwrap().data() {
            assert_relative_eq!(*v, 2.0, epsilon = 1e-9);
        }
        assert!(matches!(fit_backbone(BackboneKind::LinearAr, &[], &FitConfig::default()), Err(Error::Data(_))));
    }

    #[test]
    fn jvp_linear_and_zero() {
        let shapes = Shapes::new(2, 2, 2, 1);
        let w = Tensor::new(vec![1.0, 2.0, 0.0, -1.0, 0.5, 0.0, 3.0, 1.0], vec![2, 4]).unwrap();
        let f = Forecaster::linear(shapes, w.clone(), Tensor::vector(vec![5.0, -5.0]).unwrap()).unwrap();
        let x = Tensor::new(vec![0.3, -0.2, 1.0, 2.0], vec![2, 2]).unwrap();
        let v = Tensor::new(vec![1.0, 0.0, -1.0, 0.5], vec![2, 2]).unwrap();
        let j = f.jvp(&x, &v, JacobianProduct::default()).unwrap();
        let unbiased = Forecaster::linear(shapes, w, Tensor::zeros(&[1, 2])).unwrap();
        assert_eq!(j.data(), unbiased.predict(&v).unwrap().data());
        let z = f.jvp(&x, &Tensor::zeros(&[2, 2]), JacobianProduct::default()).unwrap();
        assert!(z.data().iter().all(|&e| e == 0.0));
    }

    #[test]
    fn mlp_jvp_fd_matches_exact() {
        let shapes = Shapes::new(3, 2, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut r = |n: usize| Tensor::vector((0..n).map(|_| rng.random_range(-0.8..0.8)).collect()).unwrap();
        let f = Forecaster::tiny_mlp(shapes, r(6 * 5), r(5), r(5 * 4), r(4)).unwrap();
        let x = r(6).reshape(&[3, 2]).unwrap();
        let v = r(6).reshape(&[3, 2]).unwrap();
        let exact = f.jvp(&x, &v, JacobianProduct::default()).unwrap();
        let fd = f.jvp(&x, &v, JacobianProduct::finite_difference()).unwrap();
        for (a, b) in exact.data().iter().zip(fd.data()) {
            assert!((a - b).abs() / a.abs().max(1e-8) < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn operator_norms() {
        let f = Forecaster::linear(Shapes::new(1, 1, 1, 1), Tensor::scalar(2.0), Tensor::scalar(0.0)).unwrap();
        assert_relative_eq!(f.operator_norm().unwrap().value, 2.0, epsilon = 1e-12);
        let f = Forecaster::linear(
            Shapes::new(2, 1, 2, 1),
            Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 3.0]]).unwrap(),
            Tensor::zeros(&[1, 2]),
        )
        .unwrap();
        assert_relative_eq!(f.operator_norm().unwrap().value, 3.0, epsilon = 1e-12);
        assert_eq!(f.lipschitz_hint(), Some(f.operator_norm().unwrap().value));

        let bb = Forecaster::blackbox(Shapes::new(1, 1, 1, 1), None, |x| Ok(x.clone()));
        assert!(matches!(bb.operator_norm(), Err(Error::Unsupported(_))));
    }

    #[test]
    fn mlp_norm_estimate_below_product_bound() {
        let shapes = Shapes::new(3, 1, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut r = |n: usize| Tensor::vector((0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let f = Forecaster::tiny_mlp(shapes, r(3 * 4), r(4), r(4 * 2), r(2)).unwrap();
        let est = f.operator_norm().unwrap();
        assert!(est.estimate);
        let bound = f.lipschitz_hint().unwrap();
        assert!(est.value <= bound + 1e-12, "{} > {}", est.value, bound);
        assert!(est.value > 0.0);
    }

    #[test]
    fn seasonal_norm_counts_repeats() {
        // H = 5, p = 2: row L−2 is copied three times → norm √3
        let f = Forecaster::seasonal_naive(Shapes::new(4, 1, 5, 1), 2, vec![0]).unwrap();
        assert_relative_eq!(f.operator_norm().unwrap().value, 3f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn gradient_reaches_input_not_params() {
        let shapes = Shapes::new(2, 1, 1, 1);
        let f = Forecaster::linear(shapes, Tensor::vector(vec![2.0, -1.0]).unwrap(), Tensor::scalar(0.5)).unwrap();
        let before = f.checksum();
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::new(vec![1.0, 1.0], vec![2, 1]).unwrap());
        let y = f.predict_on_tape(&mut tape, x).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, -1.0]);
        assert_eq!(before, f.checksum());
    }
}
