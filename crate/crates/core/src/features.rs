//! Feature engineering: min-max scaling, lag columns, trailing rolling
//! statistics, and sliding-window sample construction.

use std::collections::BTreeSet;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ingest::{is_missing, PlantSchema, TimeSeriesFrame, MISSING};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RollingStat {
    Mean,
    Std,
}

impl RollingStat {
    fn suffix(self) -> &'static str {
        match self {
            RollingStat::Mean => "rmean",
            RollingStat::Std => "rstd",
        }
    }
}

/// Rolling window durations, in seconds.
pub const ROLLING_WINDOW_SECONDS: [i64; 4] = [1800, 3600, 7200, 10800];
/// Lag duration, in seconds.
pub const LAG_SECONDS: i64 = 3600;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub interval_s: i64,
    /// Raw input columns, in order.
    pub inputs: Vec<String>,
    /// `None` disables lag columns.
    pub lag_steps: Option<usize>,
    pub rolling_windows: Vec<usize>,
    pub rolling_stats: Vec<RollingStat>,
    pub include_target_lags: bool,
    /// Model lookback `W`, in rows.
    pub window: usize,
}

impl FeatureConfig {
    /// One-hour lag plus 30 min / 1 h / 2 h / 3 h rolling mean and std over
    /// the eight plant inputs.
    pub fn hourly(interval_s: i64, window: usize) -> Self {
        Self {
            interval_s,
            inputs: PlantSchema::cesar1().input_names(),
            lag_steps: Some((LAG_SECONDS / interval_s) as usize),
            rolling_windows: ROLLING_WINDOW_SECONDS
                .iter()
                .map(|s| (s / interval_s) as usize)
                .collect(),
            rolling_stats: vec![RollingStat::Mean, RollingStat::Std],
            include_target_lags: false,
            window,
        }
    }

    /// Scaled raw inputs only.
    pub fn raw_only(interval_s: i64, window: usize) -> Self {
        Self {
            lag_steps: None,
            rolling_windows: Vec::new(),
            rolling_stats: Vec::new(),
            ..Self::hourly(interval_s, window)
        }
    }

    pub fn with_target_lags(mut self, on: bool) -> Self {
        self.include_target_lags = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.interval_s <= 0 {
            return Err(Error::Config(format!("interval must be positive, got {}", self.interval_s)));
        }
        if self.window == 0 {
            return Err(Error::Config("input window must be at least 1".into()));
        }
        if self.inputs.is_empty() {
            return Err(Error::Config("no input columns".into()));
        }
        if let Some(l) = self.lag_steps {
            if l == 0 || l as i64 * self.interval_s != LAG_SECONDS {
                return Err(Error::Config(format!(
                    "lag of {l} steps at {} s is not one hour",
                    self.interval_s
                )));
            }
        }
        for &w in &self.rolling_windows {
            if w < 2 {
                return Err(Error::DegenerateWindow(w));
            }
            if !ROLLING_WINDOW_SECONDS.contains(&(w as i64 * self.interval_s)) {
                return Err(Error::Config(format!(
                    "rolling window of {w} steps at {} s is not one of 30 min, 1 h, 2 h, 3 h",
                    self.interval_s
                )));
            }
        }
        let distinct: BTreeSet<_> = self.rolling_windows.iter().collect();
        if distinct.len() != self.rolling_windows.len() {
            return Err(Error::Config("duplicate rolling window".into()));
        }
        if self.include_target_lags && self.lag_steps.is_none() && self.rolling_stats.is_empty() {
            return Err(Error::Config("target lags requested but lag and rolling features are off".into()));
        }
        Ok(())
    }

    fn rolling_enabled(&self) -> bool {
        !self.rolling_windows.is_empty() && !self.rolling_stats.is_empty()
    }

    /// Leading rows consumed by lag and rolling features.
    pub fn warmup_rows(&self) -> usize {
        let lag = self.lag_steps.unwrap_or(0);
        let roll = if self.rolling_enabled() {
            self.rolling_windows.iter().max().map_or(0, |w| w - 1)
        } else {
            0
        };
        lag.max(roll)
    }

    fn engineered_sources(&self, target: &str) -> Vec<String> {
        let mut cols = self.inputs.clone();
        if self.include_target_lags {
            cols.push(target.to_string());
        }
        cols
    }

    fn sorted_stats(&self) -> Vec<RollingStat> {
        let s: BTreeSet<_> = self.rolling_stats.iter().copied().collect();
        s.into_iter().collect()
    }

    fn sorted_windows(&self) -> Vec<usize> {
        let mut w = self.rolling_windows.clone();
        w.sort_unstable();
        w
    }

    /// Model input columns in canonical order: raw inputs, lags, then
    /// rolling statistics ordered by (column, window, stat).
    pub fn column_names(&self, target: &str) -> Vec<String> {
        let mut names = self.inputs.clone();
        let sources = self.engineered_sources(target);
        if let Some(l) = self.lag_steps {
            names.extend(sources.iter().map(|c| lag_name(c, l)));
        }
        if self.rolling_enabled() {
            for c in &sources {
                for &w in &self.sorted_windows() {
                    for s in self.sorted_stats() {
                        names.push(rolling_name(c, w, s));
                    }
                }
            }
        }
        names
    }

    pub fn feature_count(&self, target: &str) -> usize {
        self.column_names(target).len()
    }

    /// Stable identifier of (config, target, column layout).
    pub fn fingerprint(&self, target: &str) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("config serializes"));
        h.update(b"\0target=");
        h.update(target.as_bytes());
        for c in self.column_names(target) {
            h.update(b"\0");
            h.update(c.as_bytes());
        }
        hex::encode(&h.finalize()[..16])
    }
}

pub fn lag_name(col: &str, lag: usize) -> String {
    format!("{col}_lag{lag}")
}

pub fn rolling_name(col: &str, window: usize, stat: RollingStat) -> String {
    format!("{col}_{}{window}", stat.suffix())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnScale {
    pub name: String,
    pub min: f64,
    pub max: f64,
}

/// Per-column min-max scaling to [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerState {
    pub columns: Vec<ColumnScale>,
}

impl ScalerState {
    pub fn get(&self, name: &str) -> Result<&ColumnScale> {
        self.columns
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::UnknownName(format!("scaler has no column `{name}`")))
    }

    pub fn scale(&self, name: &str, v: f64) -> Result<f64> {
        let c = self.get(name)?;
        Ok(c.scale(v))
    }

    pub fn invert(&self, name: &str, s: f64) -> Result<f64> {
        let c = self.get(name)?;
        Ok(c.invert(s))
    }
}

impl ColumnScale {
    #[inline]
    pub fn scale(&self, v: f64) -> f64 {
        (v - self.min) / (self.max - self.min)
    }

    #[inline]
    pub fn invert(&self, s: f64) -> f64 {
        s * (self.max - self.min) + self.min
    }

    pub fn range(&self) -> f64 {
        self.max - self.min
    }

    /// Identity map (min 0, max 1).
    pub fn identity(name: &str) -> Self {
        Self {
            name: name.to_string(),
            min: 0.0,
            max: 1.0,
        }
    }
}

/// Fits (min, max) over the non-missing values of each column. Call it on
/// the training segment only.
pub fn fit_scaler(frame: &TimeSeriesFrame, columns: &[String]) -> Result<ScalerState> {
    let mut out = Vec::with_capacity(columns.len());
    for name in columns {
        let col = frame.require_column(name)?;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &v in col.iter().filter(|v| !is_missing(**v)) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !(lo < hi) {
            return Err(Error::DegenerateScale(name.clone()));
        }
        out.push(ColumnScale {
            name: name.clone(),
            min: lo,
            max: hi,
        });
    }
    Ok(ScalerState { columns: out })
}

/// Adds `<col>_lag<L>` for each column; the first `L` rows are missing.
pub fn make_lags(frame: &TimeSeriesFrame, columns: &[String], lag_steps: usize) -> Result<TimeSeriesFrame> {
    if lag_steps == 0 {
        return Err(Error::InvalidArgument("lag must be at least 1 step".into()));
    }
    if lag_steps >= frame.len() {
        return Err(Error::InsufficientData(format!(
            "lag of {lag_steps} steps needs more than {} rows",
            frame.len()
        )));
    }
    let mut out = frame.clone();
    for name in columns {
        let src = frame.require_column(name)?;
        let lagged = lag_series(src, lag_steps);
        out = out.with_column(&lag_name(name, lag_steps), lagged)?;
    }
    Ok(out)
}

pub(crate) fn lag_series(src: &[f64], lag: usize) -> Vec<f64> {
    (0..src.len())
        .map(|t| if t >= lag { src[t - lag] } else { MISSING })
        .collect()
}

/// Trailing statistic over `window` values ending at `t` inclusive.
pub(crate) fn rolling_at(src: &[f64], t: usize, window: usize, stat: RollingStat) -> f64 {
    if t + 1 < window {
        return MISSING;
    }
    let vals = &src[t + 1 - window..=t];
    let mean = vals.iter().sum::<f64>() / window as f64;
    match stat {
        RollingStat::Mean => mean,
        RollingStat::Std => {
            let ss: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum();
            (ss / (window - 1) as f64).sqrt()
        }
    }
}

pub(crate) fn rolling_series(src: &[f64], window: usize, stat: RollingStat) -> Vec<f64> {
    (0..src.len()).map(|t| rolling_at(src, t, window, stat)).collect()
}

/// Adds trailing rolling statistics `<col>_rmean<w>` / `<col>_rstd<w>`;
/// the first `w - 1` rows are missing. Standard deviation uses the sample
/// divisor `w - 1`.
pub fn make_rolling(
    frame: &TimeSeriesFrame,
    columns: &[String],
    windows: &[usize],
    stats: &[RollingStat],
) -> Result<TimeSeriesFrame> {
    if let Some(&w) = windows.iter().find(|w| **w < 2) {
        return Err(Error::DegenerateWindow(w));
    }
    if let Some(&w) = windows.iter().find(|w| **w > frame.len()) {
        return Err(Error::InsufficientData(format!(
            "rolling window {w} exceeds {} rows",
            frame.len()
        )));
    }
    let mut out = frame.clone();
    for name in columns {
        let src = frame.require_column(name)?;
        for &w in windows {
            for &s in stats {
                out = out.with_column(&rolling_name(name, w, s), rolling_series(src, w, s))?;
            }
        }
    }
    Ok(out)
}

/// All model input columns (unscaled, warm-up rows missing) for `target`.
pub fn engineer(frame: &TimeSeriesFrame, config: &FeatureConfig, target: &str) -> Result<TimeSeriesFrame> {
    config.validate()?;
    let warm = config.warmup_rows();
    if frame.len() <= warm {
        return Err(Error::InsufficientData(format!(
            "{} rows do not cover {warm} warm-up rows",
            frame.len()
        )));
    }
    let sources = config.engineered_sources(target);
    let mut cols: Vec<(String, Vec<f64>)> = Vec::new();
    for name in &config.inputs {
        cols.push((name.clone(), frame.require_column(name)?.to_vec()));
    }
    let source_data: Vec<&[f64]> = sources
        .iter()
        .map(|s| frame.require_column(s))
        .collect::<Result<_>>()?;
    if let Some(l) = config.lag_steps {
        for (name, src) in sources.iter().zip(&source_data) {
            cols.push((lag_name(name, l), lag_series(src, l)));
        }
    }
    if config.rolling_enabled() {
        for (name, src) in sources.iter().zip(&source_data) {
            for &w in &config.sorted_windows() {
                for s in config.sorted_stats() {
                    cols.push((rolling_name(name, w, s), rolling_series(src, w, s)));
                }
            }
        }
    }
    if let Ok(t) = frame.require_column(target) {
        if !cols.iter().any(|(n, _)| n == target) {
            cols.push((target.to_string(), t.to_vec()));
        }
    }
    TimeSeriesFrame::new(
        frame.timestamps().to_vec(),
        cols,
        frame.interval_s(),
        frame.provenance().to_string(),
    )
}

/// Fits the scaler for every model input column plus the target, using
/// the non-warm-up rows of `train`.
pub fn fit_feature_scaler(train: &TimeSeriesFrame, config: &FeatureConfig, target: &str) -> Result<ScalerState> {
    let eng = engineer(train, config, target)?;
    let warm = config.warmup_rows();
    let body = eng.slice(warm..eng.len());
    let mut names = config.column_names(target);
    names.push(target.to_string());
    fit_scaler(&body, &names)
}

/// Engineered, scaled model inputs with warm-up rows dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub timestamps: Vec<DateTime<Utc>>,
    pub names: Vec<String>,
    /// Row-major `rows x d`.
    pub values: Vec<f64>,
    /// Leading frame rows dropped; matrix row `i` is frame row `i + warmup_rows`.
    pub warmup_rows: usize,
    /// Cells outside [0, 1] (values beyond the scaler's fitted range).
    pub out_of_range: usize,
    /// Scaled target aligned with the rows, when the frame carries it.
    pub target: Option<Vec<f64>>,
}

impl FeatureMatrix {
    pub fn rows(&self) -> usize {
        self.timestamps.len()
    }

    pub fn d(&self) -> usize {
        self.names.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.d();
        &self.values[i * d..(i + 1) * d]
    }

    pub fn to_frame(&self) -> Result<TimeSeriesFrame> {
        let d = self.d();
        let cols = self
            .names
            .iter()
            .enumerate()
            .map(|(j, n)| (n.clone(), (0..self.rows()).map(|i| self.values[i * d + j]).collect()))
            .collect();
        TimeSeriesFrame::new(self.timestamps.clone(), cols, 0, "feature matrix")
    }
}

/// Scales an engineered frame (output of [`engineer`]) into a matrix.
pub fn matrix_from_engineered(
    eng: &TimeSeriesFrame,
    config: &FeatureConfig,
    scaler: &ScalerState,
    target: &str,
) -> Result<FeatureMatrix> {
    let warm = config.warmup_rows();
    let names = config.column_names(target);
    let n = eng.len();
    let rows = n - warm;
    let d = names.len();
    let mut values = vec![0.0; rows * d];
    let mut out_of_range = 0;
    for (j, name) in names.iter().enumerate() {
        let col = eng.require_column(name)?;
        let sc = scaler.get(name)?;
        for i in 0..rows {
            let raw = col[i + warm];
            if is_missing(raw) {
                return Err(Error::InvalidArgument(format!(
                    "column `{name}` has a missing value at row {}; fill the frame first",
                    i + warm
                )));
            }
            let s = sc.scale(raw);
            if !(0.0..=1.0).contains(&s) {
                out_of_range += 1;
            }
            values[i * d + j] = s;
        }
    }
    let target = match eng.column(target) {
        Some(col) => {
            let sc = scaler.get(target)?;
            Some(col[warm..].iter().map(|v| sc.scale(*v)).collect())
        }
        None => None,
    };
    Ok(FeatureMatrix {
        timestamps: eng.timestamps()[warm..].to_vec(),
        names,
        values,
        warmup_rows: warm,
        out_of_range,
        target,
    })
}

/// Raw + lag + rolling columns, scaled, with warm-up rows dropped.
pub fn build_matrix(
    frame: &TimeSeriesFrame,
    config: &FeatureConfig,
    scaler: &ScalerState,
    target: &str,
) -> Result<FeatureMatrix> {
    let eng = engineer(frame, config, target)?;
    matrix_from_engineered(&eng, config, scaler, target)
}

/// Sliding-window samples over a feature matrix. Sample `i` is the `W`
/// consecutive rows starting at `starts[i]` paired with the target at the
/// row right after the window.
#[derive(Debug, Clone)]
pub struct WindowedDataset {
    data: Arc<Vec<f64>>,
    d: usize,
    window: usize,
    pub starts: Vec<usize>,
    pub targets: Vec<f64>,
    pub target_times: Vec<DateTime<Utc>>,
    pub target_name: String,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// The `W x d` row-major input block of sample `i`.
    pub fn sample(&self, i: usize) -> &[f64] {
        let s = self.starts[i];
        &self.data[s * self.d..(s + self.window) * self.d]
    }

    /// Matrix row index of sample `i`'s target.
    pub fn target_row(&self, i: usize) -> usize {
        self.starts[i] + self.window
    }

    /// Samples whose target matrix row lies in `rows`.
    pub fn subset(&self, rows: std::ops::Range<usize>) -> Self {
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| rows.contains(&self.target_row(i)))
            .collect();
        Self {
            data: Arc::clone(&self.data),
            d: self.d,
            window: self.window,
            starts: keep.iter().map(|&i| self.starts[i]).collect(),
            targets: keep.iter().map(|&i| self.targets[i]).collect(),
            target_times: keep.iter().map(|&i| self.target_times[i]).collect(),
            target_name: self.target_name.clone(),
        }
    }
}

/// Builds `rows - W` stride-1 samples.
pub fn window(matrix: &FeatureMatrix, target_series: &[f64], w: usize, target_name: &str) -> Result<WindowedDataset> {
    if w == 0 {
        return Err(Error::InvalidArgument("window must be at least 1".into()));
    }
    if target_series.len() != matrix.rows() {
        return Err(Error::Shape(format!(
            "target has {} values for {} matrix rows",
            target_series.len(),
            matrix.rows()
        )));
    }
    if matrix.rows() < w + 1 {
        return Err(Error::InsufficientData(format!(
            "{} rows cannot form a window of {w} plus a target",
            matrix.rows()
        )));
    }
    let count = matrix.rows() - w;
    Ok(WindowedDataset {
        data: Arc::new(matrix.values.clone()),
        d: matrix.d(),
        window: w,
        starts: (0..count).collect(),
        targets: (0..count).map(|i| target_series[i + w]).collect(),
        target_times: (0..count).map(|i| matrix.timestamps[i + w]).collect(),
        target_name: target_name.to_string(),
    })
}
