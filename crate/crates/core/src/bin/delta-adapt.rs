//! `delta-adapt`: fit backbones, train adapters, selectors and calibrators,
//! run online streams and evaluate, one subcommand per step.
//!
//! Settings resolve in layers: built-in defaults, the config recorded beside
//! an upstream backbone, a `--config` JSON file, then flags. The seed falls
//! back to `DELTA_ADAPT_SEED` when neither the file nor a flag sets it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use delta_adapt::adapters::{AdapterConfig, AdapterNet, Form, Placement};
use delta_adapt::autodiff::Tensor;
use delta_adapt::calibrators::{
    conformal_calibrate, conformal_interval, quantile_fan, write_calibration, write_intervals, ConformalCalibrator,
    ConformalConfig, IntervalSet, QuantileCalibrator, QuantileConfig,
};
use delta_adapt::checkpoint::{
    load_backbone, load_model, read_json, save_backbone, save_model, write_json, Model, RunManifest,
};
use delta_adapt::data::{
    generate, load_csv, make_windows, write_csv, SeriesFrame, Split, SplitFractions, SyntheticSpec, Window,
    WindowConfig, WindowSet,
};
use delta_adapt::forecaster::{fit_backbone, BackboneKind, FitConfig, Forecaster};
use delta_adapt::metrics::{display_pct, improvement, interval_metrics, point_metrics, MetricReport};
use delta_adapt::selector::{rank_features, write_feature_report, MaskNet, PredLoss, SelectorConfig};
use delta_adapt::training::{
    run_online, train_batch, train_joint, write_trace, ObservationStream, SelectorModel, TrainConfig, TrainLoss,
    TrainMode, TrainOutcome, Unfrozen,
};
use delta_adapt::Error;

#[derive(Parser)]
#[command(name = "delta-adapt", version, about = "Bounded adapters for frozen forecasters")]
struct Cli {
    /// Log verbosity: -v info, -vv debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic stream with known ground truth.
    Generate(GenerateArgs),
    /// Fit and freeze a built-in backbone.
    FitBackbone(FitArgs),
    /// Train an input, output or joint adapter around a frozen backbone.
    Train(TrainArgs),
    /// Learn a sparse input mask and report feature importance.
    Select(SelectArgs),
    /// Train a quantile or conformal calibrator and write intervals.
    Calibrate(CalibrateArgs),
    /// Score a backbone, and optionally a trained model, on the test split.
    Eval(EvalArgs),
    /// Stream the series once, forecasting and updating at every step.
    Online(OnlineArgs),
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON run config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input CSV; the first column holds timestamps.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Target columns, comma separated (default: the last column).
    #[arg(long, value_delimiter = ',')]
    target: Option<Vec<String>>,
    /// Context columns, comma separated (default: every column).
    #[arg(long, value_delimiter = ',')]
    inputs: Option<Vec<String>>,
    /// Timestamp column (default: the first column).
    #[arg(long)]
    date_col: Option<String>,
    /// Lookback length.
    #[arg(long = "L")]
    lookback: Option<usize>,
    /// Forecast horizon.
    #[arg(long = "H")]
    horizon: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Zero wall-clock fields so every output is byte-reproducible.
    #[arg(long)]
    canonical: bool,
    /// Worker threads for evaluation over windows (never training).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Clone, Default)]
struct Fit {
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Early-stopping patience in epochs; 0 disables early stopping.
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    /// Record the descent witness on every batch.
    #[arg(long)]
    diagnostics: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Mse,
    Mae,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PlacementArg {
    In,
    Out,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormArg {
    Add,
    Mul,
    Exp,
}

impl From<FormArg> for Form {
    fn from(f: FormArg) -> Form {
        match f {
            FormArg::Add => Form::Additive,
            FormArg::Mul => Form::Multiplicative,
            FormArg::Exp => Form::Exp,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Quantile,
    Conformal,
}

#[derive(Args)]
struct GenerateArgs {
    /// bias, ar_drift, regime_shift, planted_features, heteroscedastic or exchangeable_gaussian.
    #[arg(long)]
    kind: String,
    #[arg(long, default_value_t = 2000)]
    rows: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Extra generator parameters as a JSON object, e.g. '{"noise":0.5}'.
    #[arg(long)]
    params: Option<String>,
    #[arg(long)]
    bias: Option<f64>,
    #[arg(long)]
    shift: Option<f64>,
    #[arg(long)]
    at: Option<usize>,
    #[arg(long)]
    drift: Option<f64>,
    /// Output CSV; the oracle is written beside it as `<stem>.oracle.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    common: Common,
    /// linear_ar, seasonal_naive, tiny_mlp, or matched: the known-bias
    /// backbone of a `generate --kind bias` stream, read from its oracle file.
    #[arg(long)]
    kind: Option<String>,
    /// Oracle file for `--kind matched` (default: `<data stem>.oracle.json`).
    #[arg(long)]
    oracle: Option<PathBuf>,
    #[arg(long)]
    ridge: Option<f64>,
    #[arg(long)]
    period: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    fit: Fit,
    /// Backbone checkpoint from `fit-backbone`.
    #[arg(long)]
    backbone: Option<PathBuf>,
    #[arg(long, value_enum)]
    placement: Option<PlacementArg>,
    #[arg(long, value_enum)]
    form: Option<FormArg>,
    /// Input-adapter form when `--placement both`.
    #[arg(long, value_enum)]
    input_form: Option<FormArg>,
    /// Trust region in (0, 1].
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    /// Learn a per-horizon gate on the input-adapter path (joint mode only).
    #[arg(long)]
    gated: bool,
    /// Train by streaming at batch size 1 instead of epochs.
    #[arg(long)]
    online: bool,
    /// Fine-tune the backbone's own weights instead of an adapter (baseline only).
    #[arg(long)]
    unfreeze: bool,
}

#[derive(Args)]
struct SelectArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    fit: Fit,
    #[arg(long)]
    backbone: Option<PathBuf>,
    /// Keep-rate budget κ in (0, 1].
    #[arg(long)]
    budget: Option<f64>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    fit: Fit,
    #[arg(long)]
    backbone: Option<PathBuf>,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// Miscoverage level of conformal intervals.
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    backbone: Option<PathBuf>,
    /// Model checkpoint from `train`, `select` or `calibrate`.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Cal,
    Test,
}

#[derive(Args)]
struct OnlineArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    fit: Fit,
    #[arg(long)]
    backbone: Option<PathBuf>,
    /// Warm start from an adapter checkpoint.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Number of streaming steps (default: as many as the series allows).
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_enum)]
    placement: Option<PlacementArg>,
    #[arg(long, value_enum)]
    form: Option<FormArg>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
}

/// Every setting of one run, written back fully resolved as `config.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    data: Option<PathBuf>,
    date_col: Option<String>,
    target: Vec<String>,
    inputs: Option<Vec<String>>,
    lookback: usize,
    horizon: usize,
    splits: SplitFractions,
    standardize: bool,
    backbone_kind: BackboneKind,
    backbone_fit: FitConfig,
    backbone: Option<PathBuf>,
    model: Option<PathBuf>,
    out: PathBuf,
    seed: Option<u64>,
    canonical: bool,
    jobs: usize,
    joint: bool,
    adapter: AdapterConfig,
    input_form: Form,
    gated: bool,
    unfreeze: bool,
    train: TrainConfig,
    selector: SelectorConfig,
    method: String,
    quantile: QuantileConfig,
    conformal: ConformalConfig,
    steps: Option<usize>,
    split: Split,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: None,
            date_col: None,
            target: Vec::new(),
            inputs: None,
            lookback: 96,
            horizon: 24,
            splits: SplitFractions::default(),
            standardize: true,
            backbone_kind: BackboneKind::LinearAr,
            backbone_fit: FitConfig::default(),
            backbone: None,
            model: None,
            out: PathBuf::from("out"),
            seed: None,
            canonical: false,
            jobs: 1,
            joint: false,
            adapter: AdapterConfig::default(),
            input_form: Form::Additive,
            gated: false,
            unfreeze: false,
            train: TrainConfig::default(),
            selector: SelectorConfig::default(),
            method: "conformal".into(),
            quantile: QuantileConfig::default(),
            conformal: ConformalConfig::default(),
            steps: None,
            split: Split::Test,
        }
    }
}

/// Data fields inherited from the config stored beside a backbone.
const DATA_KEYS: [&str; 8] = ["data", "date_col", "target", "inputs", "lookback", "horizon", "splits", "standardize"];

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o.clone(),
    }
}

/// Defaults, then per-command defaults, then the upstream backbone's data
/// section, then `--config`.
fn base_config(common: &Common, backbone: Option<&Path>, command: Value) -> Result<RunConfig, Error> {
    let mut v = serde_json::to_value(RunConfig::default())?;
    merge(&mut v, &command);
    if let Some(bb) = backbone {
        let upstream = bb.with_file_name("config.json");
        if upstream.exists() {
            let up: Value = read_json(&upstream)?;
            let picked: serde_json::Map<String, Value> =
                DATA_KEYS.iter().filter_map(|k| up.get(*k).map(|x| (k.to_string(), x.clone()))).collect();
            merge(&mut v, &Value::Object(picked));
        }
    }
    if let Some(path) = &common.config {
        let file: Value = read_json(path)?;
        merge(&mut v, &file);
    }
    let mut cfg: RunConfig = serde_json::from_value(v).map_err(|e| Error::Config(format!("run config: {e}")))?;
    let c = common.clone();
    if let Some(d) = c.data {
        cfg.data = Some(d);
    }
    if let Some(d) = c.date_col {
        cfg.date_col = Some(d);
    }
    if let Some(t) = c.target {
        cfg.target = t;
    }
    if let Some(i) = c.inputs {
        cfg.inputs = Some(i);
    }
    if let Some(l) = c.lookback {
        cfg.lookback = l;
    }
    if let Some(h) = c.horizon {
        cfg.horizon = h;
    }
    if let Some(o) = c.out {
        cfg.out = o;
    }
    if let Some(s) = c.seed {
        cfg.seed = Some(s);
    }
    if c.seed.is_none() && cfg.seed.is_none() {
        cfg.seed = Some(env_seed()?);
    }
    cfg.canonical |= c.canonical;
    if let Some(j) = c.jobs {
        cfg.jobs = j;
    }
    if cfg.jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    if let Some(bb) = backbone {
        cfg.backbone = Some(bb.to_path_buf());
    }
    Ok(cfg)
}

fn env_seed() -> Result<u64, Error> {
    match std::env::var("DELTA_ADAPT_SEED") {
        Ok(s) => {
            s.trim().parse().map_err(|_| Error::Config(format!("DELTA_ADAPT_SEED `{s}` is not an unsigned integer")))
        }
        Err(_) => Ok(0),
    }
}

fn apply_fit(cfg: &mut RunConfig, fit: &Fit) {
    let t = &mut cfg.train;
    if let Some(e) = fit.epochs {
        t.epochs = e;
    }
    if let Some(l) = fit.lr {
        t.lr = l;
    }
    if let Some(b) = fit.batch_size {
        t.batch_size = b;
    }
    if let Some(p) = fit.patience {
        t.early_stop_patience = (p > 0).then_some(p);
    }
    if let Some(l) = fit.loss {
        t.loss = match l {
            LossArg::Mse => TrainLoss::Mse,
            LossArg::Mae => TrainLoss::Mae,
        };
    }
    t.diagnostics |= fit.diagnostics;
    t.seed = cfg.seed.unwrap_or(0);
    t.canonical = cfg.canonical;
}

fn seed(cfg: &RunConfig) -> u64 {
    cfg.seed.unwrap_or(0)
}

/// Loaded data plus its windows.
struct Prepared {
    frame: SeriesFrame,
    windows: WindowSet,
}

fn prepare(cfg: &mut RunConfig) -> Result<Prepared, Error> {
    let Some(path) = cfg.data.clone() else {
        return Err(Error::Config("--data is required (or `data` in --config)".into()));
    };
    let frame = load_csv(&path, &cfg.target, cfg.date_col.as_deref())?;
    if cfg.target.is_empty() {
        cfg.target = vec![frame.names.last().cloned().unwrap_or_default()];
    }
    let wc = WindowConfig {
        lookback: cfg.lookback,
        horizon: cfg.horizon,
        input_cols: cfg.inputs.clone(),
        target_cols: cfg.target.clone(),
        splits: cfg.splits,
        standardize: cfg.standardize,
    };
    let windows = make_windows(&frame, &wc)?;
    Ok(Prepared { frame, windows })
}

/// Loads a backbone and checks it against the checksum its manifest recorded.
fn backbone(cfg: &RunConfig) -> Result<(Forecaster, String), Error> {
    let Some(path) = &cfg.backbone else {
        return Err(Error::Config("--backbone is required".into()));
    };
    if !path.exists() {
        return Err(Error::Checkpoint(format!("backbone checkpoint {} not found", path.display())));
    }
    let f = load_backbone(path)?;
    let manifest = path.with_file_name("manifest.json");
    if manifest.exists() {
        let m: RunManifest = read_json(&manifest)?;
        if let Some(rec) = m.checksums.get("backbone") {
            if *rec != f.checksum() {
                return Err(Error::Checkpoint(format!(
                    "backbone checksum {} differs from {rec} recorded in {}",
                    f.checksum(),
                    manifest.display()
                )));
            }
        }
    }
    let sum = f.checksum();
    Ok((f, sum))
}

fn check_shapes(f: &Forecaster, ws: &WindowSet) -> Result<(), Error> {
    let s = f.shapes();
    let (l, d, h, m) = (ws.lookback, ws.input_cols.len(), ws.horizon, ws.target_cols.len());
    if (s.lookback, s.covariates, s.horizon, s.targets) != (l, d, h, m) {
        return Err(Error::Config(format!(
            "backbone expects L={} d={} H={} m={}, data gives L={l} d={d} H={h} m={m}",
            s.lookback, s.covariates, s.horizon, s.targets
        )));
    }
    Ok(())
}

/// Output directory plus the bookkeeping every command writes into it.
struct Run {
    dir: PathBuf,
    manifest: RunManifest,
    started: Instant,
    canonical: bool,
}

impl Run {
    fn start(command: &str, cfg: &RunConfig) -> Result<Run, Error> {
        std::fs::create_dir_all(&cfg.out).map_err(|e| Error::Io { path: cfg.out.display().to_string(), source: e })?;
        let mut run = Run {
            dir: cfg.out.clone(),
            manifest: RunManifest::new(command, seed(cfg), serde_json::to_value(cfg)?),
            started: Instant::now(),
            canonical: cfg.canonical,
        };
        run.write_json("config.json", cfg)?;
        Ok(run)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn record(&mut self, name: &str) {
        self.manifest.outputs.push(name.to_string());
    }

    fn write_json<T: Serialize>(&mut self, name: &str, v: &T) -> Result<(), Error> {
        write_json(&self.path(name), v)?;
        self.record(name);
        Ok(())
    }

    fn checksum(&mut self, key: &str, value: String) {
        self.manifest.checksums.insert(key.to_string(), value);
    }

    fn finish(mut self) -> Result<(), Error> {
        if !self.canonical {
            let ms = self.started.elapsed().as_secs_f64() * 1e3;
            self.manifest.config["wall_ms"] = json!(ms);
        }
        self.manifest.outputs.push("manifest.json".into());
        let path = self.path("manifest.json");
        write_json(&path, &self.manifest)
    }
}

/// Forecasts of `predict` over `windows`, split across `jobs` threads.
fn forecasts(
    windows: &[Window],
    jobs: usize,
    predict: &(dyn Fn(&Tensor) -> delta_adapt::Result<Tensor> + Sync),
) -> Result<Vec<Tensor>, Error> {
    if jobs <= 1 || windows.len() < 2 * jobs {
        return windows.iter().map(|w| predict(&w.x)).collect();
    }
    let chunk = windows.len().div_ceil(jobs);
    std::thread::scope(|s| {
        let handles: Vec<_> = windows
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|w| predict(&w.x)).collect::<Result<Vec<_>, Error>>()))
            .collect();
        let mut out = Vec::with_capacity(windows.len());
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok(out)
    })
}

fn targets(windows: &[Window]) -> Vec<Tensor> {
    windows.iter().map(|w| w.y.clone()).collect()
}

fn score(model: Option<&Model>, f: &Forecaster, windows: &[Window], jobs: usize) -> Result<MetricReport, Error> {
    if windows.is_empty() {
        return Err(Error::Data("the evaluation split holds no windows".into()));
    }
    let preds = match model {
        Some(m) => forecasts(windows, jobs, &|x| m.trainable().predict(f, x))?,
        None => forecasts(windows, jobs, &|x| f.predict(x))?,
    };
    point_metrics(&preds, &targets(windows), None)
}

/// Frozen and adapted test metrics with the improvement printed.
fn compare(run: &mut Run, model: &Model, f: &Forecaster, windows: &[Window], jobs: usize) -> Result<Value, Error> {
    compare_with(run, f, windows, jobs, "adapted", &|x| model.trainable().predict(f, x))
}

fn compare_with(
    run: &mut Run,
    f: &Forecaster,
    windows: &[Window],
    jobs: usize,
    label: &str,
    predict: &(dyn Fn(&Tensor) -> delta_adapt::Result<Tensor> + Sync),
) -> Result<Value, Error> {
    let frozen = score(None, f, windows, jobs)?;
    let mut adapted = point_metrics(&forecasts(windows, jobs, predict)?, &targets(windows), None)?;
    let imp = improvement(&adapted, &frozen, "frozen");
    println!("frozen   MSE {:.6e}  MAE {:.6e}", frozen.mse, frozen.mae);
    println!(
        "{label:<8} MSE {:.6e}  MAE {:.6e}  improvement {} (MSE) {} (MAE)",
        adapted.mse,
        adapted.mae,
        display_pct(imp.mse_pct),
        display_pct(imp.mae_pct)
    );
    adapted.improvement = Some(imp);
    let report = json!({ "frozen": frozen, label: adapted });
    run.write_json("metrics.json", &report)?;
    Ok(report)
}

fn save_trained(run: &mut Run, model: &Model, f: &Forecaster, outcome: Option<&TrainOutcome>) -> Result<(), Error> {
    let ck = save_model(&run.path("model.json"), model, f)?;
    run.record("model.json");
    run.checksum("model", ck.checksum.clone());
    run.checksum("backbone", f.checksum());
    println!("model checksum {}", ck.checksum);
    if let Some(o) = outcome {
        write_outcome(run, o)?;
    }
    Ok(())
}

fn write_outcome(run: &mut Run, o: &TrainOutcome) -> Result<(), Error> {
    write_trace(&run.path("trace.csv"), &o.trace, &[])?;
    run.record("trace.csv");
    let summary = json!({
        "best_epoch": o.best_epoch,
        "epochs_run": o.epochs_run,
        "early_stopped": o.early_stopped,
        "epoch_stats": o.epoch_stats,
    });
    run.write_json("train_summary.json", &summary)?;
    if let Some(w) = &o.witness {
        run.write_json("descent_witness.json", w)?;
        println!("descent witness: {} batches, {} violations", w.batches.len(), w.batch_violations());
    }
    Ok(())
}

/// Fine-tuning baseline: the output is a new backbone checkpoint, not an
/// adapter, and carries none of the adapter guarantees.
fn train_unfrozen(mut run: Run, f: &Forecaster, p: &Prepared, cfg: &RunConfig) -> Result<(), Error> {
    let mut u = Unfrozen::new(f)?;
    let outcome = train_batch(&mut u, f, p.windows.split(Split::Train), p.windows.split(Split::Val), &cfg.train)?;
    let tuned = u.forecaster()?;
    let ck = save_backbone(&run.path("backbone.json"), &tuned)?;
    run.record("backbone.json");
    run.checksum("backbone", ck.checksum.clone());
    run.checksum("frozen_backbone", f.checksum());
    println!("fine-tuned backbone checksum {}", ck.checksum);
    write_outcome(&mut run, &outcome)?;
    compare_with(&mut run, f, p.windows.split(cfg.split), cfg.jobs, "unfrozen", &|x| tuned.predict(x))?;
    run.finish()
}

fn cmd_generate(a: GenerateArgs) -> Result<(), Error> {
    let mut spec = json!({ "kind": a.kind, "seed": match a.seed { Some(s) => s, None => env_seed()? } });
    if let Some(p) = &a.params {
        let extra: Value = serde_json::from_str(p).map_err(|e| Error::Config(format!("--params: {e}")))?;
        merge(&mut spec, &extra);
    }
    for (k, v) in [("bias", a.bias), ("shift", a.shift), ("drift", a.drift)] {
        if let Some(v) = v {
            spec[k] = json!(v);
        }
    }
    if let Some(at) = a.at {
        spec["at"] = json!(at);
    }
    let spec: SyntheticSpec =
        serde_json::from_value(spec).map_err(|e| Error::Config(format!("synthetic spec: {e}")))?;
    let (frame, oracle) = generate(&spec, a.rows)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_csv(&frame, &a.out)?;
    let stem = a.out.file_stem().and_then(|s| s.to_str()).unwrap_or("series");
    let oracle_path = a.out.with_file_name(format!("{stem}.oracle.json"));
    write_json(&oracle_path, &json!({ "spec": spec, "rows": a.rows, "oracle": oracle }))?;
    println!("wrote {} rows to {}", frame.len(), a.out.display());
    Ok(())
}

fn cmd_fit_backbone(a: FitArgs) -> Result<(), Error> {
    let mut cfg = base_config(&a.common, None, json!({}))?;
    let matched = a.kind.as_deref() == Some("matched");
    if let Some(k) = a.kind.as_deref().filter(|_| !matched) {
        cfg.backbone_kind = k.parse()?;
    }
    if let Some(r) = a.ridge {
        cfg.backbone_fit.ridge_lambda = r;
    }
    if let Some(p) = a.period {
        cfg.backbone_fit.period = Some(p);
    }
    cfg.backbone_fit.seed = seed(&cfg);
    if matched {
        // the matched backbone acts on raw values
        cfg.standardize = false;
    }
    let p = prepare(&mut cfg)?;
    let mut run = Run::start("fit-backbone", &cfg)?;
    let f = if matched {
        let path = match &a.oracle {
            Some(o) => o.clone(),
            None => {
                let data = cfg.data.clone().unwrap_or_default();
                let stem = data.file_stem().and_then(|s| s.to_str()).unwrap_or("series").to_string();
                data.with_file_name(format!("{stem}.oracle.json"))
            }
        };
        let doc: Value = read_json(&path)?;
        let oracle: delta_adapt::data::Oracle = serde_json::from_value(doc["oracle"].clone())
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        oracle.matched_backbone(cfg.lookback, cfg.horizon)?
    } else {
        fit_backbone(cfg.backbone_kind, p.windows.split(Split::Train), &cfg.backbone_fit)?
    };
    check_shapes(&f, &p.windows)?;
    let ck = save_backbone(&run.path("backbone.json"), &f)?;
    run.record("backbone.json");
    run.checksum("backbone", ck.checksum.clone());
    let mut report = BTreeMap::new();
    for s in [Split::Val, Split::Test] {
        let w = p.windows.split(s);
        if !w.is_empty() {
            report.insert(format!("{s:?}").to_lowercase(), score(None, &f, w, cfg.jobs)?);
        }
    }
    run.write_json("metrics.json", &report)?;
    println!("backbone {} checksum {}", f.kind(), ck.checksum);
    run.finish()
}

fn adapter_config(
    cfg: &mut RunConfig,
    placement: Option<PlacementArg>,
    form: Option<FormArg>,
    delta: Option<f64>,
    hidden: Option<usize>,
) -> Result<(), Error> {
    match placement {
        Some(PlacementArg::In) => cfg.adapter.placement = Placement::Input,
        Some(PlacementArg::Out) => cfg.adapter.placement = Placement::Output,
        Some(PlacementArg::Both) => {
            cfg.adapter.placement = Placement::Output;
            cfg.joint = true;
        }
        None => {}
    }
    if let Some(f) = form {
        cfg.adapter.form = f.into();
    }
    if let Some(d) = delta {
        cfg.adapter.delta = d;
    }
    if let Some(h) = hidden {
        cfg.adapter.hidden_width = h;
    }
    cfg.train.joint = cfg.joint;
    cfg.adapter.validate()
}

fn build_adapter(cfg: &RunConfig, f: &Forecaster) -> Result<Model, Error> {
    let s = seed(cfg);
    if cfg.joint {
        delta_adapt::checkpoint::composite_spec(&cfg.adapter, cfg.input_form, f.shapes(), s, cfg.gated)
    } else {
        Ok(Model::Adapter(AdapterNet::new(cfg.adapter.clone(), f.shapes(), s)?))
    }
}

fn cmd_train(a: TrainArgs) -> Result<(), Error> {
    let mut cfg = base_config(&a.common, a.backbone.as_deref(), json!({}))?;
    apply_fit(&mut cfg, &a.fit);
    if let Some(f) = a.input_form {
        cfg.input_form = f.into();
    }
    cfg.gated |= a.gated;
    adapter_config(&mut cfg, a.placement, a.form, a.delta, a.hidden)?;
    if a.online {
        cfg.train.mode = TrainMode::Online;
    }
    cfg.unfreeze |= a.unfreeze;
    if cfg.unfreeze && cfg.train.mode == TrainMode::Online {
        return Err(Error::Config("--unfreeze trains in batch mode only".into()));
    }
    cfg.train = cfg.train.resolved()?;
    let (f, _) = backbone(&cfg)?;
    let p = prepare(&mut cfg)?;
    check_shapes(&f, &p.windows)?;
    let mut run = Run::start("train", &cfg)?;
    if cfg.unfreeze {
        return train_unfrozen(run, &f, &p, &cfg);
    }
    let mut model = build_adapter(&cfg, &f)?;
    if cfg.train.mode == TrainMode::Online {
        online_pass(&mut run, &mut model, &f, &p, &cfg)?;
        save_trained(&mut run, &model, &f, None)?;
    } else {
        let (train, val) = (p.windows.split(Split::Train), p.windows.split(Split::Val));
        let outcome = match &mut model {
            Model::Composite(c) => train_joint(c, &f, train, val, &cfg.train)?,
            m => train_batch(m.trainable_mut(), &f, train, val, &cfg.train)?,
        };
        save_trained(&mut run, &model, &f, Some(&outcome))?;
    }
    compare(&mut run, &model, &f, p.windows.split(cfg.split), cfg.jobs)?;
    run.finish()
}

/// The mask net needs a far larger step than the adapters' default.
fn select_defaults() -> Value {
    json!({ "train": { "lr": 1e-2, "epochs": 15, "early_stop_patience": null } })
}

fn calibrate_defaults() -> Value {
    json!({ "train": { "lr": 3e-3, "epochs": 30 } })
}

fn cmd_select(a: SelectArgs) -> Result<(), Error> {
    let mut cfg = base_config(&a.common, a.backbone.as_deref(), select_defaults())?;
    apply_fit(&mut cfg, &a.fit);
    if let Some(b) = a.budget {
        cfg.train.selector_weights = delta_adapt::selector::SelectorLossWeights {
            budget: cfg.train.selector_weights.budget.max(1.0),
            kappa: Some(b),
            ..cfg.train.selector_weights.clone()
        };
    }
    cfg.train = cfg.train.resolved()?;
    let (f, _) = backbone(&cfg)?;
    let p = prepare(&mut cfg)?;
    check_shapes(&f, &p.windows)?;
    let mut run = Run::start("select", &cfg)?;
    let s = f.shapes();
    let mask = MaskNet::new(cfg.selector.clone(), s.lookback, s.covariates, seed(&cfg))?;
    let pred = match cfg.train.loss {
        TrainLoss::Mse => PredLoss::Mse,
        TrainLoss::Mae => PredLoss::Mae,
    };
    let mut sel = SelectorModel::new(mask, cfg.train.selector_weights.clone(), pred)?;
    let outcome = train_batch(&mut sel, &f, p.windows.split(Split::Train), p.windows.split(Split::Val), &cfg.train)?;
    let eval = p.windows.split(cfg.split);
    let ranking = rank_features(&sel.mask, eval.iter().map(|w| &w.x))?;
    let names: Vec<String> = p.windows.input_cols.iter().map(|&c| p.frame.names[c].clone()).collect();
    let kappa = cfg.train.selector_weights.kappa;
    write_feature_report(&run.path("features.csv"), &ranking, &names, kappa)?;
    run.record("features.csv");
    let mut selected: Vec<usize> = ranking.entries.iter().filter(|e| e.importance > 0.5).map(|e| e.covariate).collect();
    selected.sort_unstable();
    selected.dedup();
    let order: Vec<&str> = ranking.columns_by_importance().iter().map(|&c| names[c].as_str()).collect();
    let selected: Vec<&str> = selected.iter().map(|&c| names[c].as_str()).collect();
    println!("mask ratio {:.4}, selected columns {:?}", ranking.mask_ratio, selected);
    println!("columns by importance {order:?}");
    let model = Model::Selector(sel);
    save_trained(&mut run, &model, &f, Some(&outcome))?;
    run.write_json(
        "selection.json",
        &json!({
            "kappa": kappa,
            "mask_ratio": ranking.mask_ratio,
            "selected_columns": selected,
            "columns_by_importance": order,
            "column_importance": ranking.column_importance,
            "untrained_warning": ranking.untrained_warning,
        }),
    )?;
    compare(&mut run, &model, &f, eval, cfg.jobs)?;
    run.finish()
}

fn cmd_calibrate(a: CalibrateArgs) -> Result<(), Error> {
    let mut cfg = base_config(&a.common, a.backbone.as_deref(), calibrate_defaults())?;
    apply_fit(&mut cfg, &a.fit);
    if let Some(m) = a.method {
        cfg.method = match m {
            MethodArg::Quantile => "quantile",
            MethodArg::Conformal => "conformal",
        }
        .into();
    }
    if let Some(al) = a.alpha {
        cfg.conformal.alpha = al;
    }
    cfg.train = cfg.train.resolved()?;
    let (f, _) = backbone(&cfg)?;
    let p = prepare(&mut cfg)?;
    check_shapes(&f, &p.windows)?;
    let mut run = Run::start("calibrate", &cfg)?;
    let (train, val) = (p.windows.split(Split::Train), p.windows.split(Split::Val));
    let eval = p.windows.split(cfg.split);
    let s = seed(&cfg);
    let (model, outcome, sets, mut report) = match cfg.method.as_str() {
        "quantile" => {
            let mut qc = QuantileCalibrator::new(cfg.quantile.clone(), f.shapes(), s)?;
            let o = train_batch(&mut qc, &f, train, val, &cfg.train)?;
            let sets = eval
                .iter()
                .map(|w| quantile_fan(&qc, &w.x, &f.predict(&w.x)?))
                .collect::<Result<Vec<IntervalSet>, Error>>()?;
            (Model::Quantile(qc), o, sets, json!({ "method": "quantile", "levels": cfg.quantile.levels }))
        }
        "conformal" => {
            let mut cc = ConformalCalibrator::new(cfg.conformal.clone(), f.shapes(), s)?;
            let o = train_batch(&mut cc, &f, train, val, &cfg.train)?;
            let cal = conformal_calibrate(&mut cc, &f, p.windows.split(Split::Cal), s)?;
            write_calibration(&run.path("calibration.json"), &cal)?;
            run.record("calibration.json");
            let sets = eval
                .iter()
                .map(|w| conformal_interval(&cc, &w.x, &f.predict(&w.x)?))
                .collect::<Result<Vec<IntervalSet>, Error>>()?;
            let r = json!({
                "method": "conformal",
                "alpha": cal.alpha,
                "kappa": cal.kappa,
                "n_cal": cal.n_cal,
                "rank": cal.rank,
            });
            (Model::Conformal(cc), o, sets, r)
        }
        other => return Err(Error::Config(format!("unknown calibration method `{other}`"))),
    };
    write_intervals(&run.path("intervals.csv"), &sets)?;
    run.record("intervals.csv");
    let m = interval_metrics(&sets, &targets(eval))?;
    let (picp, width) = (m.picp.unwrap_or(f64::NAN), m.mean_width.unwrap_or(f64::NAN));
    report["picp"] = json!(picp);
    report["mean_width"] = json!(width);
    report["n_eval"] = json!(eval.len());
    report["nominal"] = json!(sets.first().map(IntervalSet::nominal));
    println!(
        "coverage {picp:.4} (nominal {:.4}), mean width {width:.6}",
        report["nominal"].as_f64().unwrap_or(f64::NAN)
    );
    save_trained(&mut run, &model, &f, Some(&outcome))?;
    run.write_json("coverage.json", &report)?;
    run.finish()
}

fn cmd_eval(a: EvalArgs) -> Result<(), Error> {
    let mut cfg = base_config(&a.common, a.backbone.as_deref(), json!({}))?;
    cfg.split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Cal => Split::Cal,
        SplitArg::Test => Split::Test,
    };
    cfg.model = a.model.clone();
    let (f, sum) = backbone(&cfg)?;
    let model = match &cfg.model {
        Some(path) if !path.exists() => {
            return Err(Error::Checkpoint(format!("model checkpoint {} not found", path.display())))
        }
        Some(path) => Some(load_model(path, &f)?),
        None => None,
    };
    let p = prepare(&mut cfg)?;
    check_shapes(&f, &p.windows)?;
    let mut run = Run::start("eval", &cfg)?;
    run.checksum("backbone", sum);
    let eval = p.windows.split(cfg.split);
    match &model {
        Some(m) => {
            run.checksum("model", m.checksum());
            compare(&mut run, m, &f, eval, cfg.jobs)?;
        }
        None => {
            let r = score(None, &f, eval, cfg.jobs)?;
            println!("frozen   MSE {:.6e}  MAE {:.6e}", r.mse, r.mae);
            run.write_json("metrics.json", &json!({ "frozen": r }))?;
        }
    }
    run.finish()
}

/// One streaming pass over the first `steps + L + H − 1` rows.
fn online_pass(run: &mut Run, model: &mut Model, f: &Forecaster, p: &Prepared, cfg: &RunConfig) -> Result<(), Error> {
    let need = |steps: usize| steps + cfg.lookback + cfg.horizon - 1;
    let rows = match cfg.steps {
        Some(s) if need(s) > p.frame.len() => {
            return Err(Error::Data(format!("{s} steps need {} rows, the series has {}", need(s), p.frame.len())))
        }
        Some(s) => need(s),
        None => p.frame.len(),
    };
    let frame = p.frame.slice(0..rows)?;
    let mut stream = ObservationStream::from_windows(&frame, &p.windows)?;
    let log = run_online(model.trainable_mut(), f, &mut stream, &cfg.train)?;
    write_trace(&run.path("online_trace.csv"), &log.trace(), std::slice::from_ref(&log.attestation))?;
    run.record("online_trace.csv");
    let n = log.steps.len() as f64;
    let mean = |g: fn(&delta_adapt::training::OnlineStep) -> f64| log.steps.iter().map(g).sum::<f64>() / n;
    let summary = json!({
        "steps": log.steps.len(),
        "adapted_mse": mean(|s| s.adapted_mse),
        "adapted_mae": mean(|s| s.adapted_mae),
        "frozen_mse": mean(|s| s.frozen_mse),
        "frozen_mae": mean(|s| s.frozen_mae),
        "attestation": log.attestation,
    });
    println!(
        "online: {} steps, cumulative MSE frozen {:.6} adapted {:.6}",
        log.steps.len(),
        summary["frozen_mse"].as_f64().unwrap_or(f64::NAN),
        summary["adapted_mse"].as_f64().unwrap_or(f64::NAN)
    );
    println!("{}", log.attestation);
    run.write_json("online_summary.json", &summary)
}

fn cmd_online(a: OnlineArgs) -> Result<(), Error> {
    let mut cfg = base_config(&a.common, a.backbone.as_deref(), json!({}))?;
    apply_fit(&mut cfg, &a.fit);
    if a.placement == Some(PlacementArg::Both) {
        return Err(Error::Config("online streaming supports --placement in or out".into()));
    }
    adapter_config(&mut cfg, a.placement, a.form, a.delta, a.hidden)?;
    cfg.train.mode = TrainMode::Online;
    cfg.train = cfg.train.resolved()?;
    if let Some(s) = a.steps {
        cfg.steps = Some(s);
    }
    cfg.model = a.model.clone();
    let (f, _) = backbone(&cfg)?;
    let mut model = match &cfg.model {
        Some(path) if !path.exists() => {
            return Err(Error::Checkpoint(format!("model checkpoint {} not found", path.display())))
        }
        Some(path) => load_model(path, &f)?,
        None => build_adapter(&cfg, &f)?,
    };
    let p = prepare(&mut cfg)?;
    check_shapes(&f, &p.windows)?;
    let mut run = Run::start("online", &cfg)?;
    online_pass(&mut run, &mut model, &f, &p, &cfg)?;
    save_trained(&mut run, &model, &f, None)?;
    run.finish()
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Contract(_) | Error::Unsupported(_) | Error::Dimension { .. } => 2,
        Error::Data(_) | Error::CoverageInfeasible { .. } => 3,
        Error::Io { .. } => 4,
        Error::Checkpoint(_) => 5,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.cmd {
        Cmd::Generate(a) => cmd_generate(a),
        Cmd::FitBackbone(a) => cmd_fit_backbone(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Select(a) => cmd_select(a),
        Cmd::Calibrate(a) => cmd_calibrate(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Online(a) => cmd_online(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = exit_code(&e);
            if code == 2 {
                eprintln!("run with --help for usage");
            }
            ExitCode::from(code)
        }
    }
}
