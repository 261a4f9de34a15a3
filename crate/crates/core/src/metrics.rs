//! Point and interval scores.
//!
//! Horizon weights enter as `1/(Hm)·Σ_{h,k} w_h·err`, so zero weights mask
//! horizons without renormalizing.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::calibrators::IntervalSet;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub mse: f64,
    pub mae: f64,
    pub per_horizon_mse: Vec<f64>,
    pub per_horizon_mae: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub picp: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_width: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub improvement: Option<Improvement>,
}

/// Relative improvement over a named baseline, `100·(base − value)/base`.
///
/// `mean_pct` averages the MSE and MAE percentages; that average reproduces
/// the published IMP column, which is not defined by a formula in its source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub baseline: String,
    pub mse_pct: Option<f64>,
    pub mae_pct: Option<f64>,
    pub mean_pct: Option<f64>,
}

impl Improvement {
    /// Integer-percent display of the MSE convention, or `n/a`.
    pub fn display(&self) -> String {
        display_pct(self.mse_pct)
    }
}

pub fn display_pct(p: Option<f64>) -> String {
    p.map_or_else(|| "n/a".to_string(), |v| format!("{}%", v.round() as i64))
}

fn check_pairs(preds: &[Tensor], targets: &[Tensor]) -> Result<(usize, usize)> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::dim("metrics", format!("{} predictions vs {} targets", preds.len(), targets.len())));
    }
    let shape = preds[0].shape().to_vec();
    for (p, t) in preds.iter().zip(targets) {
        if p.shape() != shape.as_slice() || t.shape() != shape.as_slice() {
            return Err(Error::dim("metrics", format!("{:?} vs {:?}", p.shape(), t.shape())));
        }
    }
    Ok((preds[0].rows(), preds[0].cols()))
}

/// Horizon-weighted MSE and MAE over windows; `weights` defaults to all ones.
pub fn point_metrics(preds: &[Tensor], targets: &[Tensor], weights: Option<&[f64]>) -> Result<MetricReport> {
    let (h, m) = check_pairs(preds, targets)?;
    let ones = vec![1.0; h];
    let w = weights.unwrap_or(&ones);
    if w.len() != h {
        return Err(Error::dim("point_metrics", format!("{} horizon weights for H={h}", w.len())));
    }
    let n = preds.len();
    let mut ph_mse = vec![0.0; h];
    let mut ph_mae = vec![0.0; h];
    for (p, t) in preds.iter().zip(targets) {
        for hh in 0..h {
            for k in 0..m {
                let e = p.get(hh, k) - t.get(hh, k);
                ph_mse[hh] += e * e;
                ph_mae[hh] += e.abs();
            }
        }
    }
    let scale = (n * m) as f64;
    for v in ph_mse.iter_mut().chain(ph_mae.iter_mut()) {
        *v /= scale;
    }
    let mse = ph_mse.iter().zip(w).map(|(v, w)| v * w).sum::<f64>() / h as f64;
    let mae = ph_mae.iter().zip(w).map(|(v, w)| v * w).sum::<f64>() / h as f64;
    Ok(MetricReport { n, mse, mae, per_horizon_mse: ph_mse, per_horizon_mae: ph_mae, ..MetricReport::default() })
}

/// PICP and mean width of interval sets against targets.
pub fn interval_metrics(sets: &[IntervalSet], targets: &[Tensor]) -> Result<MetricReport> {
    let points: Vec<Tensor> = sets.iter().map(|s| s.point.clone()).collect();
    let mut report = point_metrics(&points, targets, None)?;
    let mut inside = 0usize;
    let mut total = 0usize;
    let mut width = 0.0;
    for (s, y) in sets.iter().zip(targets) {
        if s.lower.shape() != y.shape() || s.upper.shape() != y.shape() {
            return Err(Error::dim("interval_metrics", "interval and target shapes differ"));
        }
        for ((lo, hi), v) in s.lower.data().iter().zip(s.upper.data()).zip(y.data()) {
            if lo <= v && v <= hi {
                inside += 1;
            }
            width += hi - lo;
            total += 1;
        }
    }
    report.picp = Some(inside as f64 / total as f64);
    report.mean_width = Some(width / total as f64);
    Ok(report)
}

/// `100·(base − value)/base`, `None` when the baseline is zero.
pub fn improvement_pct(base: f64, value: f64) -> Option<f64> {
    (base != 0.0).then(|| 100.0 * (base - value) / base)
}

/// Improvement of `report` over `baseline`, both conventions.
pub fn improvement(report: &MetricReport, baseline: &MetricReport, name: &str) -> Improvement {
    let mse_pct = improvement_pct(baseline.mse, report.mse);
    let mae_pct = improvement_pct(baseline.mae, report.mae);
    let mean_pct = match (mse_pct, mae_pct) {
        (Some(a), Some(b)) => Some((a + b) / 2.0),
        _ => None,
    };
    Improvement { baseline: name.to_string(), mse_pct, mae_pct, mean_pct }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> Tensor {
        Tensor::new(v.to_vec(), vec![v.len(), 1]).unwrap()
    }

    #[test]
    fn point_examples() {
        let a = vec![col(&[1.0, 2.0, 3.0])];
        let r = point_metrics(&a, &a, None).unwrap();
        assert_eq!((r.mse, r.mae), (0.0, 0.0));
        let b = vec![col(&[3.0, 4.0, 5.0])];
        let r = point_metrics(&a, &b, None).unwrap();
        assert_eq!((r.mse, r.mae), (4.0, 2.0));
        let c = vec![col(&[2.0, 100.0, -50.0])];
        let r = point_metrics(&a, &c, Some(&[1.0, 0.0, 0.0])).unwrap();
        assert!((r.mse - 1.0 / 3.0).abs() < 1e-15);
        assert!(point_metrics(&a, &c, Some(&[1.0])).is_err());
    }

    #[test]
    fn interval_examples() {
        let y = vec![col(&[1.0, 2.0])];
        let p = col(&[0.0, 0.0]);
        let degenerate = IntervalSet {
            point: p.clone(),
            lower: p.clone(),
            upper: p.clone(),
            alpha: Some(0.1),
            levels: vec![],
            fan: vec![],
        };
        let r = interval_metrics(&[degenerate], &y).unwrap();
        assert_eq!(r.picp, Some(0.0));
        let wide = IntervalSet {
            lower: p.map(|v| v - 1e9),
            upper: p.map(|v| v + 1e9),
            point: p,
            alpha: Some(0.1),
            levels: vec![],
            fan: vec![],
        };
        let r = interval_metrics(&[wide], &y).unwrap();
        assert_eq!(r.picp, Some(1.0));
    }

    #[test]
    fn improvement_conventions() {
        let base = MetricReport { mse: 0.427, mae: 0.463, ..MetricReport::default() };
        let adapted = MetricReport { mse: 0.334, mae: 0.410, ..MetricReport::default() };
        let imp = improvement(&adapted, &base, "frozen");
        assert!((imp.mse_pct.unwrap() - 21.779_859_484_777_518).abs() < 1e-9);
        assert_eq!(imp.display(), "22%");
        assert_eq!(display_pct(imp.mean_pct), "17%");
        assert_eq!(improvement_pct(1.0, 1.0), Some(0.0));
        assert!(improvement_pct(1.0, 2.0).unwrap() < 0.0);
        assert_eq!(improvement_pct(0.0, 1.0), None);
        assert_eq!(display_pct(None), "n/a");
    }
}
