//! CSV ingestion, chronological splits, lookback/horizon windows and
//! per-window instance statistics.

use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseArray;

/// Lower bound applied to per-variate standard deviations.
pub const STD_FLOOR: f64 = 1e-5;

/// A multivariate series: `values` is `T_total x N`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    pub name: String,
    pub timestamps: Option<Vec<String>>,
    pub values: DenseArray,
    /// Seasonal period used by MASE and Naive2.
    pub period: usize,
}

impl RawSeries {
    pub fn new(name: impl Into<String>, values: DenseArray, period: usize) -> Result<Self> {
        if !values.all_finite() {
            return Err(Error::NonFinite("series values".into()));
        }
        if period == 0 {
            return Err(Error::Config("seasonal period must be positive".into()));
        }
        Ok(Self {
            name: name.into(),
            timestamps: None,
            values,
            period,
        })
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn variates(&self) -> usize {
        self.values.cols()
    }

    /// Column `v` over `range` of time steps.
    pub fn variate_slice(&self, v: usize, range: Range<usize>) -> Vec<f64> {
        range.map(|t| self.values.get(t, v)).collect()
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Load a comma-separated multivariate file. The optional date column is kept
/// as timestamps (numeric stamps compare as numbers, others as strings, so
/// ISO-8601 ordering applies) and
/// dropped from the values.
pub fn load_csv(path: impl AsRef<Path>, has_header: bool, date_column: Option<usize>, period: usize) -> Result<RawSeries> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_csv(&text, &name, has_header, date_column, period)
}

pub fn parse_csv(text: &str, name: &str, has_header: bool, date_column: Option<usize>, period: usize) -> Result<RawSeries> {
    let mut reader = csv_reader(text, has_header);
    let mut width: Option<usize> = None;
    let mut values = Vec::new();
    let mut stamps = Vec::new();
    let mut rows = 0usize;
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.iter().all(|c| c.trim().is_empty()) {
            continue;
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(Error::Parse {
                    line,
                    detail: format!("expected {w} cells, found {}", record.len()),
                })
            }
            _ => {}
        }
        for (col, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            if Some(col) == date_column {
                stamps.push(cell.to_string());
                continue;
            }
            let bad = || Error::NonNumeric {
                row: line,
                col: col + 1,
                cell: cell.to_string(),
            };
            let v: f64 = cell.parse().map_err(|_| bad())?;
            if !v.is_finite() {
                return Err(bad());
            }
            values.push(v);
        }
        rows += 1;
    }
    let Some(width) = width else {
        return Err(Error::EmptyInput(format!("{name}: no data rows")));
    };
    if rows < 2 {
        return Err(Error::InsufficientData(format!("{name}: need at least 2 rows, found {rows}")));
    }
    let has_date = date_column.is_some_and(|c| c < width);
    let n = width - usize::from(has_date);
    if n == 0 {
        return Err(Error::EmptyInput(format!("{name}: no numeric columns")));
    }
    let mut series = RawSeries::new(name, DenseArray::matrix(rows, n, values)?, period)?;
    if has_date {
        if let Some(i) = stamps.windows(2).position(|w| !stamp_before(&w[0], &w[1])) {
            return Err(Error::Parse {
                line: i + 2 + usize::from(has_header),
                detail: format!("timestamps not strictly increasing: `{}` then `{}`", stamps[i], stamps[i + 1]),
            });
        }
        series.timestamps = Some(stamps);
    }
    Ok(series)
}

/// Numeric stamps compare as numbers, anything else (ISO dates) as strings.
fn stamp_before(a: &str, b: &str) -> bool {
    match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => x < y,
        _ => a < b,
    }
}

fn csv_reader(text: &str, has_header: bool) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .from_reader(text.as_bytes())
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse {
        line,
        detail: e.to_string(),
    }
}

/// Load M4-style univariate data: one series per row, first cell is the id,
/// remaining non-empty cells are the values (rows may differ in length).
pub fn load_m4_csv(path: impl AsRef<Path>, has_header: bool, period: usize) -> Result<Vec<RawSeries>> {
    let path = path.as_ref();
    parse_m4(&read_text(path)?, has_header, period)
}

pub fn parse_m4(text: &str, has_header: bool, period: usize) -> Result<Vec<RawSeries>> {
    let mut out = Vec::new();
    for record in csv_reader(text, has_header).records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let mut cells = record.iter().map(str::trim);
        let id = cells.next().unwrap_or_default().to_string();
        if id.is_empty() && record.len() <= 1 {
            continue;
        }
        let mut vals = Vec::new();
        for (col, cell) in cells.enumerate() {
            if cell.is_empty() {
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| Error::NonNumeric {
                row: line,
                col: col + 2,
                cell: cell.to_string(),
            })?;
            vals.push(v);
        }
        if vals.len() < 2 {
            return Err(Error::InsufficientData(format!("series `{id}` has {} values", vals.len())));
        }
        let n = vals.len();
        out.push(RawSeries::new(id, DenseArray::matrix(n, 1, vals)?, period)?);
    }
    if out.is_empty() {
        return Err(Error::EmptyInput("no series rows".into()));
    }
    Ok(out)
}

/// Per-variate mean and standard deviation over a lookback block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl InstanceStats {
    /// Population statistics of each column of a `T x N` block, std floored.
    pub fn of(x: &DenseArray) -> Self {
        let (t, n) = (x.rows(), x.cols());
        let mut mean = vec![0.0; n];
        let mut std = vec![0.0; n];
        for v in 0..n {
            let m = (0..t).map(|i| x.get(i, v)).sum::<f64>() / t as f64;
            let var = (0..t).map(|i| (x.get(i, v) - m).powi(2)).sum::<f64>() / t as f64;
            mean[v] = m;
            std[v] = var.sqrt().max(STD_FLOOR);
        }
        Self { mean, std }
    }
}

/// One sample: lookback `x` (`T x N`) followed immediately by horizon `y` (`H_f x N`).
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesWindow {
    /// Index of the first lookback step in the source series.
    pub start: usize,
    pub x: DenseArray,
    pub y: DenseArray,
    pub stats: InstanceStats,
}

impl SeriesWindow {
    pub fn lookback(&self) -> usize {
        self.x.rows()
    }

    pub fn horizon(&self) -> usize {
        self.y.rows()
    }

    pub fn variates(&self) -> usize {
        self.x.cols()
    }

    /// Last index (exclusive) touched by this window.
    pub fn end(&self) -> usize {
        self.start + self.lookback() + self.horizon()
    }
}

fn window_at(series: &RawSeries, start: usize, lookback: usize, horizon: usize) -> SeriesWindow {
    let n = series.variates();
    let take = |from: usize, len: usize| {
        let mut d = Vec::with_capacity(len * n);
        for t in from..from + len {
            d.extend_from_slice(series.values.row_slice(t));
        }
        DenseArray::from_raw(vec![len, n], d)
    };
    let x = take(start, lookback);
    let y = take(start + lookback, horizon);
    let stats = InstanceStats::of(&x);
    SeriesWindow { start, x, y, stats }
}

/// Number of windows of total span `span` that fit in `len` steps at `stride`.
pub fn window_count(len: usize, span: usize, stride: usize) -> usize {
    if stride == 0 || span == 0 || len < span {
        0
    } else {
        (len - span) / stride + 1
    }
}

/// All windows over the whole series.
pub fn make_windows(series: &RawSeries, lookback: usize, horizon: usize, stride: usize) -> Result<Vec<SeriesWindow>> {
    make_windows_in(series, 0..series.len(), lookback, horizon, stride)
}

/// Windows lying entirely inside `range`.
pub fn make_windows_in(
    series: &RawSeries,
    range: Range<usize>,
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<SeriesWindow>> {
    if lookback == 0 || horizon == 0 || stride == 0 {
        return Err(Error::Config(format!(
            "lookback, horizon and stride must be >= 1 (got {lookback}, {horizon}, {stride})"
        )));
    }
    if range.end > series.len() {
        return Err(Error::OutOfRange {
            index: range.end,
            len: series.len(),
        });
    }
    let len = range.len();
    if len < lookback + horizon {
        return Err(Error::InsufficientData(format!(
            "{} steps available, lookback {lookback} + horizon {horizon} needed",
            len
        )));
    }
    let count = window_count(len, lookback + horizon, stride);
    Ok((0..count)
        .map(|k| window_at(series, range.start + k * stride, lookback, horizon))
        .collect())
}

/// Per-variate z-scoring of the lookback block: returns normalized `x` and its statistics.
pub fn instance_normalize(window: &SeriesWindow) -> (DenseArray, InstanceStats) {
    let stats = window.stats.clone();
    (normalize_with(&window.x, &stats), stats)
}

pub fn normalize_with(x: &DenseArray, stats: &InstanceStats) -> DenseArray {
    let n = x.cols();
    let mut d = x.data().to_vec();
    for row in d.chunks_mut(n) {
        for (v, val) in row.iter_mut().enumerate() {
            *val = (*val - stats.mean[v]) / stats.std[v];
        }
    }
    DenseArray::from_raw(x.shape().to_vec(), d)
}

/// Inverse of [`normalize_with`] for any `steps x N` block.
pub fn denormalize(x: &DenseArray, stats: &InstanceStats) -> DenseArray {
    let n = x.cols();
    let mut d = x.data().to_vec();
    for row in d.chunks_mut(n) {
        for (v, val) in row.iter_mut().enumerate() {
            *val = *val * stats.std[v] + stats.mean[v];
        }
    }
    DenseArray::from_raw(x.shape().to_vec(), d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Fraction of the training range kept (most recent part); 1.0 keeps all.
    pub few_shot_fraction: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.7,
            val_fraction: 0.1,
            test_fraction: 0.2,
            few_shot_fraction: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}` (train, val, test)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl SplitRanges {
    pub fn get(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => self.train.clone(),
            Split::Val => self.val.clone(),
            Split::Test => self.test.clone(),
        }
    }
}

/// Contiguous, ordered, disjoint index ranges over `len` steps.
pub fn chronological_split(len: usize, spec: &SplitSpec) -> Result<SplitRanges> {
    let fr = [spec.train_fraction, spec.val_fraction, spec.test_fraction];
    if fr.iter().any(|f| !(0.0..=1.0).contains(f)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fr:?} must be in [0, 1] and sum to 1")));
    }
    if !(spec.few_shot_fraction > 0.0 && spec.few_shot_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "few_shot_fraction {} must be in (0, 1]",
            spec.few_shot_fraction
        )));
    }
    let train_end = (len as f64 * spec.train_fraction).round() as usize;
    let val_end = ((len as f64 * (spec.train_fraction + spec.val_fraction)).round() as usize).min(len);
    let kept = ((train_end as f64 * spec.few_shot_fraction).round() as usize).max(1);
    let ranges = SplitRanges {
        train: train_end.saturating_sub(kept)..train_end,
        val: train_end..val_end,
        test: val_end..len,
    };
    for (name, r) in [("train", &ranges.train), ("val", &ranges.val), ("test", &ranges.test)] {
        if r.is_empty() {
            return Err(Error::Config(format!("{name} split is empty for {len} steps")));
        }
    }
    Ok(ranges)
}

/// Windows for every split; any split without a full window is a configuration error.
#[derive(Debug, Clone)]
pub struct SplitWindows {
    pub ranges: SplitRanges,
    pub train: Vec<SeriesWindow>,
    pub val: Vec<SeriesWindow>,
    pub test: Vec<SeriesWindow>,
}

impl SplitWindows {
    pub fn build(series: &RawSeries, spec: &SplitSpec, lookback: usize, horizon: usize, stride: usize) -> Result<Self> {
        let ranges = chronological_split(series.len(), spec)?;
        let make = |split: Split| {
            let r = ranges.get(split);
            make_windows_in(series, r.clone(), lookback, horizon, stride).map_err(|e| match e {
                Error::InsufficientData(d) => Error::Config(format!("{} split {:?} yields no window: {d}", split.as_str(), r)),
                other => other,
            })
        };
        Ok(Self {
            train: make(Split::Train)?,
            val: make(Split::Val)?,
            test: make(Split::Test)?,
            ranges,
        })
    }

    /// Combine per-series splits (M4-style collections) into one pool.
    pub fn build_many(
        series: &[RawSeries],
        spec: &SplitSpec,
        lookback: usize,
        horizon: usize,
        stride: usize,
    ) -> Result<Self> {
        let mut out: Option<Self> = None;
        for s in series {
            let w = Self::build(s, spec, lookback, horizon, stride)?;
            match &mut out {
                None => out = Some(w),
                Some(acc) => {
                    acc.train.extend(w.train);
                    acc.val.extend(w.val);
                    acc.test.extend(w.test);
                }
            }
        }
        out.ok_or_else(|| Error::EmptyInput("no series".into()))
    }

    pub fn get(&self, split: Split) -> &[SeriesWindow] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(len: usize, n: usize) -> RawSeries {
        let d = (0..len * n).map(|i| i as f64).collect();
        RawSeries::new("ramp", DenseArray::matrix(len, n, d).unwrap(), 1).unwrap()
    }

    #[test]
    fn loads_simple_csv() {
        let s = parse_csv("a,b\n1,2\n3,4\n5,6\n", "t", true, None, 1).unwrap();
        assert_eq!(s.values.shape(), &[3, 2]);
        assert_eq!(s.values.get(2, 1), 6.0);
    }

    #[test]
    fn date_column_is_dropped() {
        let mut text = String::from("date,a,b,c,d,e,f,OT\n");
        for i in 0..4 {
            text.push_str(&format!("2016-07-01 0{i}:00:00,1,2,3,4,5,6,{i}\n"));
        }
        let s = parse_csv(&text, "ett", true, Some(0), 24).unwrap();
        assert_eq!(s.variates(), 7);
        assert_eq!(s.timestamps.as_ref().unwrap().len(), 4);
    }

    #[test]
    fn malformed_rows_are_reported() {
        let err = parse_csv("1,2\n3\n", "t", false, None, 1).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = parse_csv("1,2\n3,\n", "t", false, None, 1).unwrap_err();
        assert!(matches!(err, Error::NonNumeric { row: 2, col: 2, .. }), "{err}");
        let err = parse_csv("1,2\nx,4\n", "t", false, None, 1).unwrap_err();
        assert!(matches!(err, Error::NonNumeric { row: 2, col: 1, .. }), "{err}");
        assert!(matches!(parse_csv("", "t", false, None, 1), Err(Error::EmptyInput(_))));
        assert!(matches!(parse_csv("h\n1\n", "t", true, None, 1), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn timestamps_must_increase() {
        let err = parse_csv("d,a\n2,1\n1,2\n", "t", true, Some(0), 1).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }

    #[test]
    fn m4_rows_have_variable_length() {
        let s = parse_m4("Y1,1,2,3\nY2,4,5,,\n", false, 1).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].len(), 3);
        assert_eq!(s[1].len(), 2);
        assert_eq!(s[1].name, "Y2");
    }

    #[test]
    fn window_counts() {
        assert_eq!(make_windows(&ramp(10, 1), 4, 2, 1).unwrap().len(), 5);
        assert_eq!(make_windows(&ramp(6, 1), 4, 2, 1).unwrap().len(), 1);
        assert_eq!(make_windows(&ramp(200, 1), 96, 96, 1).unwrap().len(), 9);
        assert!(matches!(make_windows(&ramp(5, 1), 4, 2, 1), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn horizon_follows_lookback() {
        let w = &make_windows(&ramp(12, 2), 4, 3, 2).unwrap()[1];
        assert_eq!(w.start, 2);
        assert_eq!(w.x.get(3, 0), 2.0 * 5.0);
        assert_eq!(w.y.get(0, 0), 2.0 * 6.0);
    }

    #[test]
    fn normalization_cases() {
        let s = RawSeries::new("c", DenseArray::matrix(5, 1, vec![2., 2., 2., 2., 9.]).unwrap(), 1).unwrap();
        let w = &make_windows(&s, 4, 1, 1).unwrap()[0];
        let (xn, st) = instance_normalize(w);
        assert_eq!(xn.data(), &[0.0; 4]);
        assert_eq!((st.mean[0], st.std[0]), (2.0, STD_FLOOR));

        let s = RawSeries::new("p", DenseArray::matrix(3, 1, vec![0., 2., 1.]).unwrap(), 1).unwrap();
        let w = &make_windows(&s, 2, 1, 1).unwrap()[0];
        let (xn, st) = instance_normalize(w);
        assert_eq!(xn.data(), &[-1.0, 1.0]);
        assert_eq!(st.std[0], 1.0);
    }

    #[test]
    fn split_arithmetic() {
        let r = chronological_split(100, &SplitSpec::default()).unwrap();
        assert_eq!((r.train, r.val, r.test), (0..70, 70..80, 80..100));
        let few = SplitSpec {
            few_shot_fraction: 0.1,
            ..SplitSpec::default()
        };
        assert_eq!(chronological_split(100, &few).unwrap().train, 63..70);
        let bad = SplitSpec {
            train_fraction: 0.5,
            val_fraction: 0.5,
            test_fraction: 0.0,
            few_shot_fraction: 1.0,
        };
        assert!(matches!(chronological_split(100, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn split_without_window_is_config_error() {
        let err = SplitWindows::build(&ramp(100, 1), &SplitSpec::default(), 12, 4, 1).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }
}
