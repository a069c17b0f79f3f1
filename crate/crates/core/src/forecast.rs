//! Multi-step forecasts with a sliding input window.

use std::io::Write;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::architectures::TrainedModel;
use crate::error::{Error, Result};
use crate::features::{build_matrix, lag_name, rolling_at, rolling_name, FeatureConfig, FeatureMatrix};
use crate::ingest::{format_timestamp, is_missing, TimeSeriesFrame};
use crate::training::{metrics, MetricsReport};

/// Predictions scored per forward pass in exogenous mode.
const BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForecastMode {
    /// Inputs and engineered features come from observed data.
    #[default]
    Exogenous,
    /// Target-derived features are rebuilt from the model's own predictions.
    Autoregressive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForecastRequest {
    /// Frame row of the first predicted step.
    pub start: usize,
    pub horizon: usize,
    #[serde(default)]
    pub mode: ForecastMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastResult {
    pub target: String,
    pub timestamps: Vec<DateTime<Utc>>,
    /// Original units.
    pub predicted: Vec<f64>,
    pub actual: Vec<Option<f64>>,
    /// `(predicted - actual) / range` of the target scaler.
    pub scaled_residuals: Vec<Option<f64>>,
}

impl ForecastResult {
    pub fn len(&self) -> usize {
        self.predicted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predicted.is_empty()
    }

    /// The first `n` steps.
    pub fn prefix(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            target: self.target.clone(),
            timestamps: self.timestamps[..n].to_vec(),
            predicted: self.predicted[..n].to_vec(),
            actual: self.actual[..n].to_vec(),
            scaled_residuals: self.scaled_residuals[..n].to_vec(),
        }
    }

    /// Metrics against the actual values; every step must have one.
    pub fn metrics(&self, model: &TrainedModel) -> Result<MetricsReport> {
        let actual: Vec<f64> = self
            .actual
            .iter()
            .enumerate()
            .map(|(i, a)| {
                a.ok_or_else(|| Error::InsufficientData(format!("no actual value at forecast step {i}")))
            })
            .collect::<Result<_>>()?;
        metrics(&self.predicted, &actual, model.descriptor.scaler.get(&self.target)?)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv_to(f)
    }

    /// `timestamp,predicted,actual` with a blank actual when unknown.
    pub fn write_csv_to<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["timestamp", "predicted", "actual"])?;
        for i in 0..self.len() {
            out.write_record([
                format_timestamp(&self.timestamps[i]),
                self.predicted[i].to_string(),
                self.actual[i].map(|a| a.to_string()).unwrap_or_default(),
            ])?;
        }
        out.flush().map_err(|e| Error::io("forecast csv", e))?;
        Ok(())
    }
}

/// Fingerprint of the model's feature layout as realized on `frame`.
pub fn dataset_fingerprint(model: &TrainedModel, frame: &TimeSeriesFrame) -> String {
    let d = &model.descriptor;
    let cfg = FeatureConfig {
        interval_s: frame.interval_s(),
        inputs: d
            .feature_config
            .inputs
            .iter()
            .filter(|c| frame.column(c).is_some())
            .cloned()
            .collect(),
        ..d.feature_config.clone()
    };
    cfg.fingerprint(&d.target)
}

/// Errors unless `frame` can feed `model` the features it was trained on.
pub fn check_compatible(model: &TrainedModel, frame: &TimeSeriesFrame) -> Result<()> {
    let d = &model.descriptor;
    let expected = d.feature_config.fingerprint(&d.target);
    if expected != d.feature_fingerprint {
        return Err(Error::FingerprintMismatch {
            expected: d.feature_fingerprint.clone(),
            actual: expected,
        });
    }
    let mut actual = dataset_fingerprint(model, frame);
    if d.feature_config.include_target_lags && frame.column(&d.target).is_none() {
        actual = format!("{actual}-no-target");
    }
    if actual != expected {
        return Err(Error::FingerprintMismatch { expected, actual });
    }
    Ok(())
}

/// Validates the request bounds against the model and frame.
pub fn check_request(model: &TrainedModel, frame: &TimeSeriesFrame, req: &ForecastRequest) -> Result<()> {
    let fc = &model.descriptor.feature_config;
    let min_start = fc.warmup_rows() + fc.window;
    if req.horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be at least 1 step".into()));
    }
    if req.start < min_start {
        return Err(Error::InvalidArgument(format!(
            "start {} precedes the first forecastable row {min_start}",
            req.start
        )));
    }
    if req.start + req.horizon > frame.len() {
        return Err(Error::InsufficientData(format!(
            "start {} + horizon {} runs past the {} rows of the dataset",
            req.start,
            req.horizon,
            frame.len()
        )));
    }
    if req.mode == ForecastMode::Autoregressive && !fc.include_target_lags {
        return Err(Error::InvalidArgument(
            "autoregressive mode needs a model trained with target lags".into(),
        ));
    }
    Ok(())
}

/// Forecasts `req.horizon` steps starting at frame row `req.start`. Step `t`
/// sees only frame rows before `t`.
pub fn forecast(model: &TrainedModel, frame: &TimeSeriesFrame, req: &ForecastRequest) -> Result<ForecastResult> {
    check_compatible(model, frame)?;
    check_request(model, frame, req)?;
    let d = &model.descriptor;
    let fc = &d.feature_config;
    let w = fc.window;
    let warm = fc.warmup_rows();
    let end = req.start + req.horizon;
    let lo = req.start - w - warm;
    let history = frame.slice(lo..end - 1);
    let matrix = build_matrix(&history, fc, &d.scaler, &d.target)?;
    // Matrix row r is frame row lo + warm + r, so step t reads rows t-W..t.
    let first = req.start - lo - warm - w;
    let scale = d.scaler.get(&d.target)?;

    let scaled = match req.mode {
        ForecastMode::Exogenous => {
            let dim = matrix.d();
            let mut out = Vec::with_capacity(req.horizon);
            let starts: Vec<usize> = (0..req.horizon).map(|k| first + k).collect();
            for chunk in starts.chunks(BATCH) {
                let batch: Vec<&[f64]> = chunk
                    .iter()
                    .map(|&s| &matrix.values[s * dim..(s + w) * dim])
                    .collect();
                out.extend(model.network.predict(&batch)?);
            }
            out
        }
        ForecastMode::Autoregressive => autoregressive(model, &history, matrix, req, lo)?,
    };

    let observed = frame.column(&d.target);
    let mut result = ForecastResult {
        target: d.target.clone(),
        timestamps: frame.timestamps()[req.start..end].to_vec(),
        predicted: Vec::with_capacity(req.horizon),
        actual: Vec::with_capacity(req.horizon),
        scaled_residuals: Vec::with_capacity(req.horizon),
    };
    for (k, s) in scaled.into_iter().enumerate() {
        let p = scale.invert(s);
        if !p.is_finite() {
            return Err(Error::InvalidArgument(format!("non-finite prediction at step {k}")));
        }
        let a = observed.map(|c| c[req.start + k]).filter(|v| !is_missing(*v));
        result.predicted.push(p);
        result.actual.push(a);
        result.scaled_residuals.push(a.map(|a| (p - a) / scale.range()));
    }
    Ok(result)
}

/// Rebuilds the target-derived columns of the rows feeding each step from a
/// target series in which every row at or after `req.start` holds the
/// model's own earlier prediction.
fn autoregressive(
    model: &TrainedModel,
    history: &TimeSeriesFrame,
    mut matrix: FeatureMatrix,
    req: &ForecastRequest,
    lo: usize,
) -> Result<Vec<f64>> {
    let d = &model.descriptor;
    let fc = &d.feature_config;
    let target = &d.target;
    let (w, warm, dim) = (fc.window, fc.warmup_rows(), matrix.d());
    let scale = d.scaler.get(target)?;
    let observed = history.require_column(target)?;
    // Target series in history coordinates (history row = frame row - lo).
    let mut y: Vec<f64> = observed[..req.start - lo].to_vec();

    enum Derived {
        Lag(usize),
        Rolling(usize, crate::features::RollingStat),
    }
    let mut derived: Vec<(usize, Derived, &crate::features::ColumnScale)> = Vec::new();
    for (j, name) in matrix.names.iter().enumerate() {
        if let Some(l) = fc.lag_steps {
            if *name == lag_name(target, l) {
                derived.push((j, Derived::Lag(l), d.scaler.get(name)?));
            }
        }
        for &win in &fc.rolling_windows {
            for &stat in &fc.rolling_stats {
                if *name == rolling_name(target, win, stat) {
                    derived.push((j, Derived::Rolling(win, stat), d.scaler.get(name)?));
                }
            }
        }
    }

    let mut out = Vec::with_capacity(req.horizon);
    for k in 0..req.horizon {
        let t = req.start - lo + k;
        for r in t - w..t {
            let row = r - warm;
            for (j, kind, sc) in &derived {
                let raw = match kind {
                    Derived::Lag(l) => y[r - l],
                    Derived::Rolling(win, stat) => rolling_at(&y, r, *win, *stat),
                };
                matrix.values[row * dim + j] = sc.scale(raw);
            }
        }
        let first_row = t - w - warm;
        let window = &matrix.values[first_row * dim..(first_row + w) * dim];
        let s = model.network.predict(&[window])?[0];
        y.push(scale.invert(s));
        out.push(s);
    }
    Ok(out)
}

/// Metrics for each horizon, all measured from the same start.
pub fn horizon_degradation(
    model: &TrainedModel,
    frame: &TimeSeriesFrame,
    start: usize,
    horizons: &[usize],
    mode: ForecastMode,
) -> Result<Vec<(usize, MetricsReport)>> {
    let longest = *horizons
        .iter()
        .max()
        .ok_or_else(|| Error::InvalidArgument("no horizons requested".into()))?;
    let full = forecast(
        model,
        frame,
        &ForecastRequest {
            start,
            horizon: longest,
            mode,
        },
    )?;
    horizons
        .iter()
        .map(|&h| Ok((h, full.prefix(h).metrics(model)?)))
        .collect()
}

/// Steps per day at `interval_s`.
pub fn steps_per_day(interval_s: i64) -> usize {
    (86_400 / interval_s) as usize
}
