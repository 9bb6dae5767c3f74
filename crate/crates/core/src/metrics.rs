//! Point-forecast error measures, the seasonal MASE scale, the Naive2
//! reference forecaster and OWA.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scale-dependent and percentage errors over equally long slices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointMetrics {
    pub mse: f64,
    pub mae: f64,
    pub smape: f64,
    /// Absent when any true value is exactly zero.
    pub mape: Option<f64>,
}

fn check_lengths(y_true: &[f64], y_pred: &[f64]) -> Result<()> {
    if y_true.len() != y_pred.len() {
        return Err(Error::DimMismatch(format!(
            "y_true has {} values, y_pred {}",
            y_true.len(),
            y_pred.len()
        )));
    }
    if y_true.is_empty() {
        return Err(Error::EmptyInput("metric over an empty horizon".into()));
    }
    Ok(())
}

/// One SMAPE term (without the 200 factor); `0/0` counts as zero.
fn smape_term(t: f64, p: f64) -> f64 {
    let den = t.abs() + p.abs();
    if den == 0.0 {
        0.0
    } else {
        (t - p).abs() / den
    }
}

/// MSE, MAE, SMAPE (in [0, 200]) and MAPE (percent) averaged over all values.
pub fn point_metrics(y_true: &[f64], y_pred: &[f64]) -> Result<PointMetrics> {
    check_lengths(y_true, y_pred)?;
    let n = y_true.len() as f64;
    let (mut se, mut ae, mut sm, mut ap) = (0.0, 0.0, 0.0, 0.0);
    let mut mape_ok = true;
    for (&t, &p) in y_true.iter().zip(y_pred) {
        let e = t - p;
        se += e * e;
        ae += e.abs();
        sm += smape_term(t, p);
        if t == 0.0 {
            mape_ok = false;
        } else {
            ap += e.abs() / t.abs();
        }
    }
    Ok(PointMetrics {
        mse: se / n,
        mae: ae / n,
        smape: 200.0 * sm / n,
        mape: mape_ok.then_some(100.0 * ap / n),
    })
}

/// Mean absolute seasonal difference `|x_j - x_{j-m}|` over `series`.
fn seasonal_scale(series: &[f64], m: usize) -> Option<f64> {
    if series.len() <= m {
        return None;
    }
    let s: f64 = (m..series.len()).map(|j| (series[j] - series[j - m]).abs()).sum();
    Some(s / (series.len() - m) as f64)
}

/// MASE with the scale taken from seasonal differences of the horizon
/// itself (the `1/(H-m) sum_{j=m+1..H}` form). `Ok(None)` when that scale is zero.
pub fn mase(y_true: &[f64], y_pred: &[f64], m: usize) -> Result<Option<f64>> {
    check_lengths(y_true, y_pred)?;
    if m == 0 || y_true.len() <= m {
        return Err(Error::InsufficientData(format!(
            "MASE needs horizon > m (horizon {}, m {m})",
            y_true.len()
        )));
    }
    let scale = seasonal_scale(y_true, m).unwrap_or(0.0);
    Ok(mase_with_scale(y_true, y_pred, scale))
}

/// Classical MASE: the scale comes from the in-sample history.
pub fn mase_classical(history: &[f64], y_true: &[f64], y_pred: &[f64], m: usize) -> Result<Option<f64>> {
    check_lengths(y_true, y_pred)?;
    let Some(scale) = (m > 0).then(|| seasonal_scale(history, m)).flatten() else {
        return Err(Error::InsufficientData(format!(
            "classical MASE needs history > m (history {}, m {m})",
            history.len()
        )));
    };
    Ok(mase_with_scale(y_true, y_pred, scale))
}

fn mase_with_scale(y_true: &[f64], y_pred: &[f64], scale: f64) -> Option<f64> {
    if !(scale > 0.0) {
        return None;
    }
    let mae = y_true.iter().zip(y_pred).map(|(t, p)| (t - p).abs()).sum::<f64>() / y_true.len() as f64;
    Some(mae / scale)
}

/// `1/2 (SMAPE / SMAPE_ref + MASE / MASE_ref)`; `None` if a reference is not positive.
pub fn owa(smape: f64, mase: f64, ref_smape: f64, ref_mase: f64) -> Option<f64> {
    if ref_smape > 0.0 && ref_mase > 0.0 {
        Some(0.5 * (smape / ref_smape + mase / ref_mase))
    } else {
        None
    }
}

fn acf(x: &[f64], lag: usize) -> f64 {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let den: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
    if den == 0.0 {
        return 0.0;
    }
    let num: f64 = (lag..n).map(|i| (x[i] - mean) * (x[i - lag] - mean)).sum();
    num / den
}

/// 90% autocorrelation test for seasonality at lag `m`, as used by the M4
/// benchmarks. Series shorter than `3m` are treated as non-seasonal.
pub fn seasonality_test(x: &[f64], m: usize) -> bool {
    if m <= 1 || x.len() < 3 * m {
        return false;
    }
    let sq: f64 = (1..m).map(|k| acf(x, k).powi(2)).sum();
    let limit = 1.645 * ((1.0 + 2.0 * sq) / x.len() as f64).sqrt();
    acf(x, m).abs() > limit
}

/// Multiplicative seasonal indices (mean 1) from a classical decomposition:
/// centered moving-average trend, then per-position averages of `x / trend`.
pub fn seasonal_indices(x: &[f64], m: usize) -> Option<Vec<f64>> {
    let n = x.len();
    if m <= 1 || n < 2 * m || x.iter().any(|&v| v <= 0.0) {
        return None;
    }
    // centered MA of order m (2 x m for even m)
    let half = m / 2;
    let mut trend = vec![f64::NAN; n];
    for (t, slot) in trend.iter_mut().enumerate().take(n - half).skip(half) {
        *slot = if m % 2 == 1 {
            x[t - half..=t + half].iter().sum::<f64>() / m as f64
        } else {
            let inner: f64 = x[t - half + 1..t + half].iter().sum();
            (inner + 0.5 * (x[t - half] + x[t + half])) / m as f64
        };
    }
    let mut sums = vec![0.0; m];
    let mut counts = vec![0usize; m];
    for t in 0..n {
        if trend[t].is_finite() && trend[t] != 0.0 {
            sums[t % m] += x[t] / trend[t];
            counts[t % m] += 1;
        }
    }
    if counts.contains(&0) {
        return None;
    }
    let mut idx: Vec<f64> = sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
    let mean = idx.iter().sum::<f64>() / m as f64;
    idx.iter_mut().for_each(|v| *v /= mean);
    Some(idx)
}

/// Naive2: last-value forecast on the seasonally adjusted series, then
/// reseasonalized; plain last-value naive when `m == 1` or the test fails.
pub fn naive2_forecast(history: &[f64], horizon: usize, m: usize) -> Result<Vec<f64>> {
    let n = history.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!("Naive2 needs >= 2 history points, got {n}")));
    }
    let last = history[n - 1];
    let indices = if seasonality_test(history, m) {
        seasonal_indices(history, m)
    } else {
        None
    };
    Ok(match indices {
        None => vec![last; horizon],
        Some(si) => {
            let level = last / si[(n - 1) % m];
            (0..horizon).map(|k| level * si[(n + k) % m]).collect()
        }
    })
}

/// Last observed value repeated over the horizon.
pub fn naive_forecast(history: &[f64], horizon: usize) -> Result<Vec<f64>> {
    let last = *history
        .last()
        .ok_or_else(|| Error::InsufficientData("naive forecast needs history".into()))?;
    Ok(vec![last; horizon])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaseMode {
    /// Scale from seasonal differences over the forecast horizon.
    #[default]
    Horizon,
    /// Scale from seasonal differences over the lookback history.
    Classical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceMetrics {
    pub smape: f64,
    pub mase: f64,
}

/// One evaluated series: lookback history, truth and forecast over the horizon.
#[derive(Debug, Clone, Copy)]
pub struct ForecastItem<'a> {
    pub history: &'a [f64],
    pub truth: &'a [f64],
    pub pred: &'a [f64],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub split: String,
    pub run: String,
    pub horizon: usize,
    pub period: usize,
    pub series: usize,
    pub mse: f64,
    pub mae: f64,
    pub smape: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mape: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mase: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub owa: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<ReferenceMetrics>,
    /// Notes about metrics reported as absent.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl MetricReport {
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Attach (or replace) a reference and recompute OWA.
    pub fn set_reference(&mut self, reference: ReferenceMetrics) {
        self.reference = Some(reference);
        self.owa = self.mase.and_then(|m| owa(self.smape, m, reference.smape, reference.mase));
        self.flags.retain(|f| !f.starts_with("owa"));
        if self.owa.is_none() {
            self.flags.push("owa: undefined (zero reference or absent MASE)".into());
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub period: usize,
    pub mase_mode: MaseMode,
    /// Compute the Naive2 reference (and thus OWA) from each item's history.
    pub naive2: bool,
}

/// Aggregate metrics over many series: MSE/MAE/MAPE over all points,
/// SMAPE/MASE as per-series values averaged over series.
pub fn evaluate(items: &[ForecastItem<'_>], opts: &EvalOptions) -> Result<MetricReport> {
    let first = items.first().ok_or(Error::EmptyBatch)?;
    let horizon = first.truth.len();
    let mut flags = Vec::new();
    let (mut se, mut ae, mut ap, mut count) = (0.0, 0.0, 0.0, 0usize);
    let mut mape_ok = true;
    let (mut smape_sum, mut mase_sum, mut mase_n) = (0.0, 0.0, 0usize);
    let (mut ref_smape, mut ref_mase, mut ref_mase_n) = (0.0, 0.0, 0usize);
    let mut mase_skipped = 0usize;
    for it in items {
        if it.truth.len() != horizon {
            return Err(Error::DimMismatch(format!(
                "horizon {} differs from {horizon}",
                it.truth.len()
            )));
        }
        let pm = point_metrics(it.truth, it.pred)?;
        let h = horizon as f64;
        se += pm.mse * h;
        ae += pm.mae * h;
        match pm.mape {
            Some(v) => ap += v * h,
            None => mape_ok = false,
        }
        count += horizon;
        smape_sum += pm.smape;
        let series_mase = |pred: &[f64]| -> Result<Option<f64>> {
            match opts.mase_mode {
                MaseMode::Horizon => mase(it.truth, pred, opts.period),
                MaseMode::Classical => mase_classical(it.history, it.truth, pred, opts.period),
            }
        };
        let model_mase = series_mase(it.pred).ok().flatten();
        match model_mase {
            Some(v) => {
                mase_sum += v;
                mase_n += 1;
            }
            None => mase_skipped += 1,
        }
        if opts.naive2 {
            let n2 = naive2_forecast(it.history, horizon, opts.period)?;
            ref_smape += point_metrics(it.truth, &n2)?.smape;
            if let Some(v) = series_mase(&n2).ok().flatten() {
                ref_mase += v;
                ref_mase_n += 1;
            }
        }
    }
    let n = items.len() as f64;
    if !mape_ok {
        flags.push("mape: undefined (zero true value)".into());
    }
    if mase_skipped > 0 {
        flags.push(format!(
            "mase: {mase_skipped} of {} series skipped (zero scale or horizon <= m)",
            items.len()
        ));
    }
    if !opts.naive2 {
        flags.push("owa: absent (naive2 disabled and no reference given)".into());
    }
    let mut report = MetricReport {
        dataset: String::new(),
        split: String::new(),
        run: String::new(),
        horizon,
        period: opts.period,
        series: items.len(),
        mse: se / count as f64,
        mae: ae / count as f64,
        smape: smape_sum / n,
        mape: mape_ok.then_some(ap / count as f64),
        mase: (mase_n > 0).then(|| mase_sum / mase_n as f64),
        owa: None,
        reference: None,
        flags,
    };
    if opts.naive2 && ref_mase_n > 0 {
        report.set_reference(ReferenceMetrics {
            smape: ref_smape / n,
            mase: ref_mase / ref_mase_n as f64,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_case() {
        let m = point_metrics(&[1.0, 2.0], &[2.0, 2.0]).unwrap();
        assert_eq!((m.mse, m.mae), (0.5, 0.5));
        assert!((m.smape - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.mape, Some(50.0));
    }

    #[test]
    fn zero_conventions() {
        let m = point_metrics(&[0.0, 1.0], &[0.0, 1.0]).unwrap();
        assert_eq!(m.smape, 0.0);
        assert_eq!(m.mape, None);
        assert!(point_metrics(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn mase_cases() {
        assert_eq!(mase(&[1., 2., 3., 4.], &[1., 2., 3., 5.], 1).unwrap(), Some(0.25));
        assert_eq!(mase(&[1., 2., 3., 4.], &[1., 2., 3., 4.], 1).unwrap(), Some(0.0));
        assert!(matches!(mase(&[1., 2.], &[1., 2.], 2), Err(Error::InsufficientData(_))));
        assert_eq!(mase(&[3., 3., 3.], &[1., 2., 3.], 1).unwrap(), None);
    }

    #[test]
    fn owa_cases() {
        assert_eq!(owa(10.0, 2.0, 10.0, 2.0), Some(1.0));
        assert_eq!(owa(5.0, 2.0, 10.0, 2.0), Some(0.75));
        assert_eq!(owa(5.0, 2.0, 0.0, 2.0), None);
    }

    #[test]
    fn naive2_cases() {
        assert_eq!(naive2_forecast(&[1.0, 4.0, 2.0], 3, 1).unwrap(), vec![2.0; 3]);
        assert_eq!(naive2_forecast(&[5.0; 40], 4, 4).unwrap(), vec![5.0; 4]);
        assert!(naive2_forecast(&[1.0], 3, 1).is_err());
        let pattern = [3.0, 5.0, 9.0, 4.0];
        let hist: Vec<f64> = (0..24).map(|t| pattern[t % 4]).collect();
        assert!(seasonality_test(&hist, 4));
        let f = naive2_forecast(&hist, 8, 4).unwrap();
        for (k, v) in f.iter().enumerate() {
            assert!((v - pattern[(24 + k) % 4]).abs() < 1e-6, "{f:?}");
        }
    }

    #[test]
    fn report_serializes_one_line() {
        let truth = [1.0, 2.0, 3.0, 4.0];
        let pred = [1.5, 2.0, 3.0, 4.0];
        let hist = [0.0, 1.0, 0.5];
        let items = [ForecastItem {
            history: &hist,
            truth: &truth,
            pred: &pred,
        }];
        let opts = EvalOptions {
            period: 1,
            mase_mode: MaseMode::Horizon,
            naive2: true,
        };
        let r = evaluate(&items, &opts).unwrap();
        assert!(r.owa.is_some());
        let line = r.to_json_line().unwrap();
        assert!(!line.contains('\n'));
        let back: MetricReport = serde_json::from_str(&line).unwrap();
        assert_eq!(back, r);
    }
}
