//! Series ingestion, chronological windowing, and synthetic streams with
//! known ground truth.

mod csvio;
pub mod synthetic;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub use csvio::{load_csv, write_csv};
pub use synthetic::{generate, Oracle, SyntheticKind, SyntheticSpec};

/// One `(context, target)` pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    /// `L × d` context.
    pub x: Tensor,
    /// `H × m` target.
    pub y: Tensor,
    /// Row index of the first context row in the source series.
    pub origin: usize,
}

/// A multivariate series with strictly increasing timestamps.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesFrame {
    /// Unix seconds.
    pub timestamps: Vec<i64>,
    /// `T × d`.
    pub values: Tensor,
    pub names: Vec<String>,
    pub frequency: String,
    /// Rows dropped at ingestion because they held NaN or empty cells.
    pub rejected_rows: usize,
}

impl SeriesFrame {
    pub fn new(timestamps: Vec<i64>, values: Tensor, names: Vec<String>) -> Result<Self> {
        if values.rows() != timestamps.len() || values.cols() != names.len() {
            return Err(Error::Data(format!(
                "frame has {} timestamps, {} names, values {:?}",
                timestamps.len(),
                names.len(),
                values.shape()
            )));
        }
        if let Some(i) = timestamps.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::Data(format!(
                "timestamps not strictly increasing at row {} ({} then {})",
                i + 1,
                timestamps[i],
                timestamps[i + 1]
            )));
        }
        let frequency = infer_frequency(&timestamps);
        Ok(SeriesFrame { timestamps, values, names, frequency, rejected_rows: 0 })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn width(&self) -> usize {
        self.names.len()
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.names.iter().position(|n| n == name).ok_or_else(|| Error::Data(format!("missing column `{name}`")))
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.len()).map(|t| self.values.get(t, j)).collect()
    }

    /// Rows `range` as a new frame.
    pub fn slice(&self, range: Range<usize>) -> Result<Self> {
        if range.start > range.end || range.end > self.len() {
            return Err(Error::Data(format!("rows {range:?} outside a frame of {}", self.len())));
        }
        let w = self.width();
        let values = Tensor::new(self.values.data()[range.start * w..range.end * w].to_vec(), vec![range.len(), w])?;
        let mut out = SeriesFrame::new(self.timestamps[range].to_vec(), values, self.names.clone())?;
        out.frequency.clone_from(&self.frequency);
        Ok(out)
    }
}

fn infer_frequency(ts: &[i64]) -> String {
    let mut diffs: Vec<i64> = ts.windows(2).map(|w| w[1] - w[0]).collect();
    if diffs.is_empty() {
        return "unknown".into();
    }
    diffs.sort_unstable();
    let step = diffs[diffs.len() / 2];
    match step {
        s if s % 86_400 == 0 => format!("{}d", s / 86_400),
        s if s % 3_600 == 0 => format!("{}h", s / 3_600),
        s if s % 60 == 0 => format!("{}min", s / 60),
        s => format!("{s}s"),
    }
}

/// Chronological split labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Cal,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::Cal, Split::Test];

    fn index(self) -> usize {
        self as usize
    }
}

/// Split fractions over rows; default 60/10/10/20.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub cal: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions { train: 0.6, val: 0.1, cal: 0.1, test: 0.2 }
    }
}

impl SplitFractions {
    pub fn all_train() -> Self {
        SplitFractions { train: 1.0, val: 0.0, cal: 0.0, test: 0.0 }
    }

    fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.cal, self.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions {parts:?} must lie in [0,1] and sum to 1")));
        }
        Ok(())
    }

    /// Row boundaries `[0, b1, b2, b3, T]`.
    fn boundaries(&self, t: usize) -> [usize; 5] {
        let cut = |f: f64| ((t as f64) * f).round() as usize;
        let b1 = cut(self.train);
        let b2 = cut(self.train + self.val).max(b1);
        let b3 = cut(self.train + self.val + self.cal).max(b2);
        [0, b1, b2, b3, t]
    }
}

/// Per-column z-score statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    /// Fits on rows `rows` of the given columns (population std; a zero std becomes 1).
    pub fn fit(values: &Tensor, rows: Range<usize>, cols: &[usize]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::Data("cannot fit a scaler on an empty train range".into()));
        }
        let mut mean = Vec::with_capacity(cols.len());
        let mut std = Vec::with_capacity(cols.len());
        for &c in cols {
            let mu = rows.clone().map(|t| values.get(t, c)).sum::<f64>() / n as f64;
            let var = rows.clone().map(|t| (values.get(t, c) - mu).powi(2)).sum::<f64>() / n as f64;
            let sd = var.sqrt();
            mean.push(mu);
            std.push(if sd > 0.0 { sd } else { 1.0 });
        }
        Ok(Scaler { mean, std })
    }

    pub fn identity(width: usize) -> Self {
        Scaler { mean: vec![0.0; width], std: vec![1.0; width] }
    }

    pub fn transform(&self, k: usize, v: f64) -> f64 {
        (v - self.mean[k]) / self.std[k]
    }

    pub fn inverse(&self, k: usize, v: f64) -> f64 {
        v * self.std[k] + self.mean[k]
    }
}

/// Options for [`make_windows`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub lookback: usize,
    pub horizon: usize,
    /// Context columns; `None` means every column.
    pub input_cols: Option<Vec<String>>,
    pub target_cols: Vec<String>,
    #[serde(default)]
    pub splits: SplitFractions,
    #[serde(default = "yes")]
    pub standardize: bool,
}

fn yes() -> bool {
    true
}

impl WindowConfig {
    pub fn new(lookback: usize, horizon: usize, target_cols: Vec<String>) -> Self {
        WindowConfig {
            lookback,
            horizon,
            input_cols: None,
            target_cols,
            splits: SplitFractions::default(),
            standardize: true,
        }
    }
}

/// Chronologically split windows over one series.
#[derive(Clone, Debug)]
pub struct WindowSet {
    pub lookback: usize,
    pub horizon: usize,
    pub input_cols: Vec<usize>,
    pub target_cols: Vec<usize>,
    /// Statistics over the union of input and target columns, in frame column order.
    pub scaler: Scaler,
    pub scaled_cols: Vec<usize>,
    /// Row ranges holding each split's labels, in `Split::ALL` order.
    pub label_rows: [Range<usize>; 4],
    windows: Vec<Window>,
    ranges: [Range<usize>; 4],
}

impl WindowSet {
    pub fn all(&self) -> &[Window] {
        &self.windows
    }

    pub fn split(&self, s: Split) -> &[Window] {
        &self.windows[self.ranges[s.index()].clone()]
    }

    pub fn window_range(&self, s: Split) -> Range<usize> {
        self.ranges[s.index()].clone()
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn split_of(&self, i: usize) -> Split {
        Split::ALL.into_iter().find(|s| self.ranges[s.index()].contains(&i)).expect("window index in range")
    }
}

/// Slides stride-1 windows over `frame` and assigns each to the split that
/// contains its whole label range; windows whose labels straddle a boundary
/// are dropped. The scaler is fit on train rows only.
pub fn make_windows(frame: &SeriesFrame, cfg: &WindowConfig) -> Result<WindowSet> {
    cfg.splits.validate()?;
    let (l, h) = (cfg.lookback, cfg.horizon);
    if l == 0 || h == 0 {
        return Err(Error::Config("lookback and horizon must be positive".into()));
    }
    let t = frame.len();
    if t < l + h {
        return Err(Error::Data(format!("series has {t} rows; windows with L={l}, H={h} need at least {}", l + h)));
    }
    let input_cols: Vec<usize> = match &cfg.input_cols {
        Some(names) => names.iter().map(|n| frame.column_index(n)).collect::<Result<_>>()?,
        None => (0..frame.width()).collect(),
    };
    let target_cols: Vec<usize> = cfg.target_cols.iter().map(|n| frame.column_index(n)).collect::<Result<_>>()?;
    if target_cols.is_empty() || input_cols.is_empty() {
        return Err(Error::Config("need at least one input and one target column".into()));
    }

    let b = cfg.splits.boundaries(t);
    let mut scaled_cols: Vec<usize> = input_cols.iter().chain(&target_cols).copied().collect();
    scaled_cols.sort_unstable();
    scaled_cols.dedup();
    let scaler = if cfg.standardize {
        Scaler::fit(&frame.values, 0..b[1], &scaled_cols)?
    } else {
        Scaler::identity(scaled_cols.len())
    };
    let slot = |c: usize| scaled_cols.binary_search(&c).expect("scaled column");
    let scaled = |row: usize, c: usize| scaler.transform(slot(c), frame.values.get(row, c));

    let mut windows = Vec::new();
    let mut ranges: [Range<usize>; 4] = Default::default();
    for (si, range) in ranges.iter_mut().enumerate() {
        let (lo, hi) = (b[si], b[si + 1]);
        let start = windows.len();
        // label rows [o+L, o+L+H) ⊂ [lo, hi)
        let first = lo.saturating_sub(l);
        for o in first..=t - l - h {
            if o + l < lo {
                continue;
            }
            if o + l + h > hi {
                break;
            }
            let x: Vec<f64> =
                (o..o + l).flat_map(|r| input_cols.iter().map(move |&c| (r, c))).map(|(r, c)| scaled(r, c)).collect();
            let y: Vec<f64> = (o + l..o + l + h)
                .flat_map(|r| target_cols.iter().map(move |&c| (r, c)))
                .map(|(r, c)| scaled(r, c))
                .collect();
            windows.push(Window {
                x: Tensor::new(x, vec![l, input_cols.len()])?,
                y: Tensor::new(y, vec![h, target_cols.len()])?,
                origin: o,
            });
        }
        *range = start..windows.len();
    }
    let label_rows = [b[0]..b[1], b[1]..b[2], b[2]..b[3], b[3]..b[4]];
    Ok(WindowSet { lookback: l, horizon: h, input_cols, target_cols, scaler, scaled_cols, label_rows, windows, ranges })
}
