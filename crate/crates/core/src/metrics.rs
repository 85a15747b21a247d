//! MAE, RMSE and MAPE per forecast interval, horizon slices, and bin-wise
//! comparison of two forecasters.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Result, StpsError};
use crate::scalar::Scalar;

/// Entries with `|truth|` below this are excluded from MAPE.
pub const MAPE_MASK_THRESHOLD: f64 = 1.0;
/// Reported horizon slices in 5-minute intervals (1, 2, 4 and 8 hours).
pub const HORIZON_SLICES: [usize; 4] = [12, 24, 48, 96];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetricKind {
    Mae,
    Rmse,
    Mape,
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricKind::Mae => "mae",
            MetricKind::Rmse => "rmse",
            MetricKind::Mape => "mape",
        })
    }
}

fn check_lengths(truth: usize, pred: usize) -> Result<()> {
    if truth != pred {
        return Err(StpsError::Shape {
            op: "metrics",
            detail: format!("truth has {truth} entries, prediction {pred}"),
        });
    }
    Ok(())
}

/// Number of entries excluded from MAPE.
pub fn mape_masked_count<T: Scalar>(truth: &[T]) -> usize {
    truth.iter().filter(|t| t.to_f64_lossy().abs() < MAPE_MASK_THRESHOLD).count()
}

/// One metric over paired vectors. `None` when undefined: empty input, or
/// MAPE with every entry masked.
pub fn metric_at<T: Scalar>(kind: MetricKind, truth: &[T], pred: &[T]) -> Result<Option<f64>> {
    check_lengths(truth.len(), pred.len())?;
    let pairs = truth.iter().zip(pred).map(|(t, p)| (t.to_f64_lossy(), p.to_f64_lossy()));
    let (sum, count) = match kind {
        MetricKind::Mae => pairs.fold((0.0, 0usize), |(s, c), (t, p)| (s + (p - t).abs(), c + 1)),
        MetricKind::Rmse => pairs.fold((0.0, 0usize), |(s, c), (t, p)| (s + (p - t) * (p - t), c + 1)),
        MetricKind::Mape => pairs
            .filter(|(t, _)| t.abs() >= MAPE_MASK_THRESHOLD)
            .fold((0.0, 0usize), |(s, c), (t, p)| (s + ((p - t) / t).abs(), c + 1)),
    };
    if count == 0 {
        return Ok(None);
    }
    let mean = sum / count as f64;
    Ok(Some(match kind {
        MetricKind::Mae => mean,
        MetricKind::Rmse => mean.sqrt(),
        MetricKind::Mape => 100.0 * mean,
    }))
}

/// Metrics of one forecast interval (1-based).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub interval: usize,
    pub mae: f64,
    pub rmse: f64,
    pub mape: Option<f64>,
    pub masked_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_horizon: Vec<HorizonMetrics>,
    pub avg_mae: f64,
    pub avg_rmse: f64,
    /// Mean over intervals where MAPE is defined.
    pub avg_mape: Option<f64>,
    pub masked_count: usize,
    /// Rows of `per_horizon` at the reported slices.
    pub slices: Vec<HorizonMetrics>,
}

/// Slice intervals present for horizon length `l_prime`; `[l_prime]` when
/// it is shorter than the first slice.
pub fn slice_intervals(l_prime: usize) -> Vec<usize> {
    let v: Vec<usize> = HORIZON_SLICES.iter().copied().filter(|&j| j <= l_prime).collect();
    if v.is_empty() {
        vec![l_prime]
    } else {
        v
    }
}

/// Report over `truth`/`pred` laid out `[rows, l′]` (rows are every
/// location of every window).
pub fn build_report<T: Scalar>(truth: &[T], pred: &[T], rows: usize, l_prime: usize) -> Result<MetricsReport> {
    check_lengths(truth.len(), pred.len())?;
    if rows == 0 || l_prime == 0 || truth.len() != rows * l_prime {
        return Err(StpsError::Shape {
            op: "build_report",
            detail: format!("{} entries for {rows} rows x {l_prime} intervals", truth.len()),
        });
    }
    let column = |x: &[T], j: usize| -> Vec<T> { (0..rows).map(|r| x[r * l_prime + j]).collect() };
    let mut per_horizon = Vec::with_capacity(l_prime);
    for j in 0..l_prime {
        let (t, p) = (column(truth, j), column(pred, j));
        per_horizon.push(HorizonMetrics {
            interval: j + 1,
            mae: metric_at(MetricKind::Mae, &t, &p)?.expect("non-empty"),
            rmse: metric_at(MetricKind::Rmse, &t, &p)?.expect("non-empty"),
            mape: metric_at(MetricKind::Mape, &t, &p)?,
            masked_count: mape_masked_count(&t),
        });
    }
    let mean = |f: &dyn Fn(&HorizonMetrics) -> f64| per_horizon.iter().map(f).sum::<f64>() / l_prime as f64;
    let mapes: Vec<f64> = per_horizon.iter().filter_map(|h| h.mape).collect();
    let slices = slice_intervals(l_prime)
        .into_iter()
        .map(|j| per_horizon[j - 1].clone())
        .collect();
    Ok(MetricsReport {
        avg_mae: mean(&|h| h.mae),
        avg_rmse: mean(&|h| h.rmse),
        avg_mape: (!mapes.is_empty()).then(|| mapes.iter().sum::<f64>() / mapes.len() as f64),
        masked_count: per_horizon.iter().map(|h| h.masked_count).sum(),
        per_horizon,
        slices,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsReport {
    /// CSV with one row per interval and a final `avg` row.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "horizon_interval,mae,rmse,mape,masked_count")?;
        for h in &self.per_horizon {
            writeln!(w, "{},{},{},{},{}", h.interval, h.mae, h.rmse, opt(h.mape), h.masked_count)?;
        }
        writeln!(
            w,
            "avg,{},{},{},{}",
            self.avg_mae,
            self.avg_rmse,
            opt(self.avg_mape),
            self.masked_count
        )?;
        Ok(())
    }

    /// CSV of the horizon slices with the horizon in hours.
    pub fn write_slices_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "horizon_interval,hours,mae,rmse,mape")?;
        for h in &self.slices {
            let hours = h.interval as f64 * 5.0 / 60.0;
            writeln!(w, "{},{},{},{},{}", h.interval, hours, h.mae, h.rmse, opt(h.mape))?;
        }
        Ok(())
    }
}

/// Sorts the forecasts (rows of `[rows, l′]`) by descending MAE under
/// `pred_a`, splits them into `bins` equal groups, and returns per bin the
/// percentage by which `pred_b` lowers the group's mean MAE. `None` for
/// empty bins or bins where `pred_a` is exact.
pub fn binned_improvement<T: Scalar>(
    truth: &[T],
    pred_a: &[T],
    pred_b: &[T],
    rows: usize,
    l_prime: usize,
    bins: usize,
) -> Result<Vec<Option<f64>>> {
    check_lengths(truth.len(), pred_a.len())?;
    check_lengths(truth.len(), pred_b.len())?;
    if truth.len() != rows * l_prime || bins == 0 {
        return Err(StpsError::Shape {
            op: "binned_improvement",
            detail: format!("{} entries for {rows} rows x {l_prime} intervals, {bins} bins", truth.len()),
        });
    }
    let row_mae = |p: &[T], r: usize| -> f64 {
        let s = r * l_prime;
        metric_at(MetricKind::Mae, &truth[s..s + l_prime], &p[s..s + l_prime])
            .expect("equal lengths")
            .unwrap_or(0.0)
    };
    let mae_a: Vec<f64> = (0..rows).map(|r| row_mae(pred_a, r)).collect();
    let mae_b: Vec<f64> = (0..rows).map(|r| row_mae(pred_b, r)).collect();
    let mut order: Vec<usize> = (0..rows).collect();
    order.sort_by(|&i, &j| mae_a[j].total_cmp(&mae_a[i]).then(i.cmp(&j)));
    Ok((0..bins)
        .map(|k| {
            let members = &order[k * rows / bins..(k + 1) * rows / bins];
            if members.is_empty() {
                return None;
            }
            let a = members.iter().map(|&r| mae_a[r]).sum::<f64>() / members.len() as f64;
            let b = members.iter().map(|&r| mae_b[r]).sum::<f64>() / members.len() as f64;
            (a > 0.0).then(|| 100.0 * (a - b) / a)
        })
        .collect())
}
