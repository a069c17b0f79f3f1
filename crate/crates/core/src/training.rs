//! Supervised training, forward-chaining cross-validation, Bayesian
//! hyperparameter search, and the metric suite.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use chrono::{DateTime, Utc};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::architectures::{
    Architecture, ModelDescriptor, Network, NetworkSpec, TrainedModel, TrainingMetadata,
};
use crate::error::{Error, Result};
use crate::features::{
    build_matrix, fit_feature_scaler, window, ColumnScale, FeatureConfig, FeatureMatrix, ScalerState,
    WindowedDataset,
};
use crate::ingest::{SplitFractions, TimeSeriesFrame};
use crate::neuralcore::{adam_step, clip_global_norm, AdamConfig, AdamState};

/// Batch size used when only predicting.
const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub deterministic: bool,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            max_epochs: 40,
            patience: 5,
            learning_rate: 1e-3,
            seed: 0,
            deterministic: true,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max epochs must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip norm {} must be positive", self.clip_norm)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights from the best validation epoch.
    pub network: Network,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

impl TrainOutcome {
    pub fn epochs_run(&self) -> usize {
        self.history.len()
    }
}

/// Scaled predictions for every sample of `data`.
pub fn predict_dataset(network: &Network, data: &WindowedDataset) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let batch: Vec<&[f64]> = chunk.iter().map(|&i| data.sample(i)).collect();
        out.extend(network.predict(&batch)?);
    }
    Ok(out)
}

fn dataset_mse(network: &Network, data: &WindowedDataset) -> Result<f64> {
    let pred = predict_dataset(network, data)?;
    Ok(pred
        .iter()
        .zip(&data.targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / data.len() as f64)
}

/// Adam on MSE with per-epoch shuffled batches, global-norm clipping and
/// early stopping on the validation loss. The returned network holds the
/// best-validation weights. When `log` is given, one JSON record per epoch
/// is written to it.
pub fn train(
    initial: Network,
    train_set: &WindowedDataset,
    val_set: &WindowedDataset,
    config: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InsufficientData(format!(
            "training needs samples in both sets (train {}, val {})",
            train_set.len(),
            val_set.len()
        )));
    }
    for (label, ds) in [("train", train_set), ("validation", val_set)] {
        if ds.d() != initial.spec.input_dim {
            return Err(Error::Shape(format!(
                "{label} set has {} features, network expects {}",
                ds.d(),
                initial.spec.input_dim
            )));
        }
    }
    if let (Some(last), Some(first)) = (train_set.target_times.last(), val_set.target_times.first()) {
        if first <= last {
            return Err(Error::Ordering(format!(
                "validation starts at {first}, not after training end {last}"
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_ba7c);
    let mut net = initial;
    let mut adam = AdamState::new(
        AdamConfig {
            lr: config.learning_rate,
            ..AdamConfig::default()
        },
        &net.params,
    );
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best = (net.params.clone(), f64::INFINITY, 0usize);
    let mut history = Vec::new();
    let mut stale = 0;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&[f64]> = chunk.iter().map(|&i| train_set.sample(i)).collect();
            let targets: Vec<f64> = chunk.iter().map(|&i| train_set.targets[i]).collect();
            let (loss, mut grads) = net.loss_and_grads(&batch, &targets)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("training loss became {loss}"),
                });
            }
            total += loss * chunk.len() as f64;
            clip_global_norm(&mut grads, config.clip_norm);
            adam_step(&mut adam, &mut net.params, &grads)?;
        }
        let train_loss = total / train_set.len() as f64;
        let val_loss = dataset_mse(&net, val_set)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: format!("validation loss became {val_loss}"),
            });
        }
        let rec = EpochRecord {
            epoch,
            train_loss,
            val_loss,
        };
        if let Some(w) = log.as_deref_mut() {
            serde_json::to_writer(&mut *w, &rec)?;
            writeln!(w).map_err(|e| Error::io("training log", e))?;
        }
        history.push(rec);
        if val_loss < best.1 {
            best = (net.params.clone(), val_loss, epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    net.params = best.0;
    Ok(TrainOutcome {
        network: net,
        history,
        best_epoch: best.2,
        best_val_loss: best.1,
    })
}

/// MSE / RMSE / MAE on scaled residuals; MAPE and R² in original units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mse: f64,
    pub rmse: f64,
    pub mae: f64,
    /// Percent; `None` when some actual value is (near) zero.
    pub mape: Option<f64>,
    /// `None` when the actual series is constant.
    pub r2: Option<f64>,
    pub n: usize,
}

const MAPE_EPS: f64 = 1e-9;

pub fn metrics(pred: &[f64], actual: &[f64], scale: &ColumnScale) -> Result<MetricsReport> {
    if pred.len() != actual.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} actual values",
            pred.len(),
            actual.len()
        )));
    }
    let n = pred.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!("metrics need at least 2 points, got {n}")));
    }
    let range = scale.range();
    let nf = n as f64;
    let mut se = 0.0;
    let mut ae = 0.0;
    for (p, a) in pred.iter().zip(actual) {
        let r = (p - a) / range;
        se += r * r;
        ae += r.abs();
    }
    let mse = se / nf;
    let mape = if actual.iter().all(|a| a.abs() > MAPE_EPS) {
        Some(100.0 * pred.iter().zip(actual).map(|(p, a)| ((p - a) / a).abs()).sum::<f64>() / nf)
    } else {
        None
    };
    let mean = actual.iter().sum::<f64>() / nf;
    let ss_tot: f64 = actual.iter().map(|a| (a - mean) * (a - mean)).sum();
    let ss_res: f64 = pred.iter().zip(actual).map(|(p, a)| (p - a) * (p - a)).sum();
    let r2 = (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot);
    Ok(MetricsReport {
        mse,
        rmse: mse.sqrt(),
        mae: ae / nf,
        mape,
        r2,
        n,
    })
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>, suffix: &str| match v {
            Some(x) => format!("{x:.6}{suffix}"),
            None => "undefined".to_string(),
        };
        writeln!(f, "MSE  {:.8}", self.mse)?;
        writeln!(f, "RMSE {:.8}", self.rmse)?;
        writeln!(f, "MAE  {:.8}", self.mae)?;
        writeln!(f, "MAPE {}", opt(self.mape, "%"))?;
        writeln!(f, "R2   {}", opt(self.r2, ""))?;
        write!(f, "n    {}", self.n)
    }
}

/// Windows over a whole frame, split chronologically by target row.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub target: String,
    pub feature_config: FeatureConfig,
    pub scaler: ScalerState,
    pub matrix: FeatureMatrix,
    pub all: WindowedDataset,
    pub train: WindowedDataset,
    pub val: WindowedDataset,
    pub test: WindowedDataset,
    /// Frame rows ending the train and validation segments.
    pub boundaries: (usize, usize),
}

impl PreparedData {
    pub fn target_scale(&self) -> Result<&ColumnScale> {
        self.scaler.get(&self.target)
    }
}

/// Fits the scaler on the training segment, engineers features over the
/// whole frame (features only look backwards), and splits samples by the
/// segment their target falls in.
pub fn prepare(
    frame: &TimeSeriesFrame,
    feature_config: &FeatureConfig,
    target: &str,
    fractions: &SplitFractions,
) -> Result<PreparedData> {
    feature_config.validate()?;
    let (train_end, val_end) = fractions.boundaries(frame.len())?;
    let warm = feature_config.warmup_rows();
    let w = feature_config.window;
    if train_end <= warm + w + 1 || val_end == train_end || val_end == frame.len() {
        return Err(Error::SplitTooSmall(format!(
            "{} rows leave no samples in some segment (warm-up {warm}, window {w})",
            frame.len()
        )));
    }
    let scaler = fit_feature_scaler(&frame.slice(0..train_end), feature_config, target)?;
    prepare_with_scaler(frame, feature_config, target, scaler, (train_end, val_end))
}

pub(crate) fn prepare_with_scaler(
    frame: &TimeSeriesFrame,
    feature_config: &FeatureConfig,
    target: &str,
    scaler: ScalerState,
    (train_end, val_end): (usize, usize),
) -> Result<PreparedData> {
    let matrix = build_matrix(frame, feature_config, &scaler, target)?;
    let tgt = matrix
        .target
        .clone()
        .ok_or_else(|| Error::Schema(format!("frame has no target column `{target}`")))?;
    let all = window(&matrix, &tgt, feature_config.window, target)?;
    let warm = matrix.warmup_rows;
    let n = matrix.rows();
    let te = train_end.saturating_sub(warm).min(n);
    let ve = val_end.saturating_sub(warm).min(n);
    Ok(PreparedData {
        target: target.to_string(),
        feature_config: feature_config.clone(),
        train: all.subset(0..te),
        val: all.subset(te..ve),
        test: all.subset(ve..n),
        all,
        scaler,
        matrix,
        boundaries: (train_end, val_end),
    })
}

/// Network shape choices that do not depend on the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub architecture: Architecture,
    pub hidden: usize,
    pub layers: usize,
    pub kernel: usize,
}

impl ModelShape {
    pub fn new(architecture: Architecture, hidden: usize) -> Self {
        let s = NetworkSpec::new(architecture, 1, hidden);
        Self {
            architecture,
            hidden,
            layers: s.layers,
            kernel: s.kernel,
        }
    }

    pub fn network_spec(&self, input_dim: usize) -> NetworkSpec {
        NetworkSpec {
            architecture: self.architecture,
            input_dim,
            hidden: self.hidden,
            layers: self.layers,
            kernel: self.kernel,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: TrainedModel,
    pub history: Vec<EpochRecord>,
    pub prepared: PreparedData,
}

/// Prepares the data, trains a network on it and packages the model.
pub fn fit(
    frame: &TimeSeriesFrame,
    target: &str,
    shape: ModelShape,
    feature_config: &FeatureConfig,
    fractions: &SplitFractions,
    config: &TrainConfig,
    log: Option<&mut dyn Write>,
) -> Result<FitResult> {
    let prepared = prepare(frame, feature_config, target, fractions)?;
    let spec = shape.network_spec(prepared.matrix.d());
    let outcome = train(Network::build(spec, config.seed)?, &prepared.train, &prepared.val, config, log)?;
    let descriptor = ModelDescriptor::new(spec, target, feature_config.clone(), prepared.scaler.clone())?;
    let metadata = TrainingMetadata {
        seed: config.seed,
        deterministic: config.deterministic,
        epochs_run: outcome.epochs_run(),
        best_epoch: outcome.best_epoch,
        best_val_loss: outcome.best_val_loss,
        data_span: frame.span(),
        dataset_id: None,
    };
    Ok(FitResult {
        model: TrainedModel {
            descriptor,
            network: outcome.network,
            metadata,
        },
        history: outcome.history,
        prepared,
    })
}

/// Metrics of one-step predictions over `data`.
pub fn evaluate(model: &TrainedModel, data: &WindowedDataset) -> Result<MetricsReport> {
    let scale = model.descriptor.scaler.get(&model.descriptor.target)?;
    let pred = predict_dataset(&model.network, data)?;
    let p: Vec<f64> = pred.iter().map(|v| scale.invert(*v)).collect();
    let a: Vec<f64> = data.targets.iter().map(|v| scale.invert(*v)).collect();
    metrics(&p, &a, scale)
}

pub fn write_history_jsonl(history: &[EpochRecord], mut w: impl Write) -> Result<()> {
    for rec in history {
        serde_json::to_writer(&mut w, rec)?;
        writeln!(w).map_err(|e| Error::io("training log", e))?;
    }
    Ok(())
}

/// Expanding-window folds over `n` rows: with `block = n / (2k)` and
/// `t_0 = n - k * block`, fold `i` trains on `[0, t_i)` and validates on
/// `[t_i, t_i + block)`.
pub fn fold_boundaries(n: usize, folds: usize) -> Result<Vec<(usize, usize)>> {
    if folds < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {folds}")));
    }
    let block = n / (2 * folds);
    if block == 0 {
        return Err(Error::InsufficientData(format!("{n} rows cannot form {folds} folds")));
    }
    let t0 = n - folds * block;
    Ok((0..folds).map(|i| (t0 + i * block, t0 + (i + 1) * block)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    /// Validation MSE per fold, in fold order.
    pub fold_mse: Vec<f64>,
    pub mean_mse: f64,
}

/// Runs `eval(fold, train_end, val_end)` for every fold, in parallel, and
/// averages the returned validation MSEs.
pub fn forward_chain_cv_with<F>(n: usize, folds: usize, eval: F) -> Result<CvReport>
where
    F: Fn(usize, usize, usize) -> Result<f64> + Sync,
{
    let bounds = fold_boundaries(n, folds)?;
    let fold_mse: Vec<f64> = bounds
        .par_iter()
        .enumerate()
        .map(|(i, &(t, v))| eval(i, t, v))
        .collect::<Result<_>>()?;
    let mean_mse = fold_mse.iter().sum::<f64>() / fold_mse.len() as f64;
    Ok(CvReport { fold_mse, mean_mse })
}

/// Share of each fold's training rows held back for early stopping.
const INNER_VAL_FRACTION: f64 = 0.15;

/// Forward-chaining CV of a network shape on `frame`. Each fold fits its own
/// scaler on its training rows and early-stops on the last 15% of them.
pub fn forward_chain_cv(
    frame: &TimeSeriesFrame,
    target: &str,
    shape: ModelShape,
    feature_config: &FeatureConfig,
    config: &TrainConfig,
    folds: usize,
) -> Result<CvReport> {
    feature_config.validate()?;
    forward_chain_cv_with(frame.len(), folds, |fold, t, v| {
        let inner = t - ((t as f64 * INNER_VAL_FRACTION) as usize).max(1);
        let sub = frame.slice(0..v);
        let scaler = fit_feature_scaler(&frame.slice(0..inner), feature_config, target)?;
        let warm = feature_config.warmup_rows();
        if inner <= warm + feature_config.window + 1 {
            return Err(Error::InsufficientData(format!("fold {fold} has too few training rows")));
        }
        let p = prepare_with_scaler(&sub, feature_config, target, scaler, (inner, t))?;
        let spec = shape.network_spec(p.matrix.d());
        let fold_cfg = TrainConfig {
            seed: config.seed.wrapping_add(fold as u64),
            ..config.clone()
        };
        let out = train(Network::build(spec, fold_cfg.seed)?, &p.train, &p.val, &fold_cfg, None)?;
        dataset_mse(&out.network, &p.test)
    })
}

/// One searchable dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParamDomain {
    Uniform { lo: f64, hi: f64 },
    LogUniform { lo: f64, hi: f64 },
    Integer { lo: i64, hi: i64 },
    Choice { values: Vec<f64> },
}

impl ParamDomain {
    fn validate(&self, name: &str) -> Result<()> {
        let ok = match self {
            ParamDomain::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo < hi,
            ParamDomain::LogUniform { lo, hi } => lo.is_finite() && hi.is_finite() && *lo > 0.0 && lo < hi,
            ParamDomain::Integer { lo, hi } => lo <= hi,
            ParamDomain::Choice { values } => !values.is_empty() && values.iter().all(|v| v.is_finite()),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("bad search domain for `{name}`: {self:?}")))
        }
    }

    /// Maps a unit-interval coordinate to a parameter value.
    fn decode(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        match self {
            ParamDomain::Uniform { lo, hi } => lo + u * (hi - lo),
            ParamDomain::LogUniform { lo, hi } => (lo.ln() + u * (hi.ln() - lo.ln())).exp(),
            ParamDomain::Integer { lo, hi } => {
                let span = (hi - lo + 1) as f64;
                (*lo + ((u * span).floor() as i64).min(hi - lo)) as f64
            }
            ParamDomain::Choice { values } => {
                let k = ((u * values.len() as f64).floor() as usize).min(values.len() - 1);
                values[k]
            }
        }
    }

    /// Unit-interval coordinate the surrogate sees for a decoded value.
    fn encode(&self, v: f64) -> f64 {
        match self {
            ParamDomain::Uniform { lo, hi } => (v - lo) / (hi - lo),
            ParamDomain::LogUniform { lo, hi } => (v.ln() - lo.ln()) / (hi.ln() - lo.ln()),
            ParamDomain::Integer { lo, hi } => (v - *lo as f64 + 0.5) / ((hi - lo + 1) as f64),
            ParamDomain::Choice { values } => {
                let k = values.iter().position(|x| *x == v).unwrap_or(0);
                (k as f64 + 0.5) / values.len() as f64
            }
        }
    }
}

pub type HyperConfig = BTreeMap<String, f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperoptSpec {
    pub space: Vec<(String, ParamDomain)>,
    pub initial_design: usize,
    pub budget: usize,
    /// Random candidates scored by expected improvement per iteration.
    pub candidates: usize,
    pub seed: u64,
}

/// Objective value recorded for a non-finite evaluation.
pub const PENALTY: f64 = 1e6;
const MIN_CANDIDATES: usize = 1024;
const LENGTH_SCALES: [f64; 5] = [0.05, 0.1, 0.2, 0.4, 0.8];
const GP_JITTER: f64 = 1e-6;

impl HyperoptSpec {
    /// The LSTM search space for one architecture.
    pub fn lstm(architecture: Architecture, budget: usize, initial_design: usize, seed: u64) -> Self {
        let mut space = vec![
            ("hidden".to_string(), ParamDomain::Integer { lo: 16, hi: 128 }),
            ("learning_rate".to_string(), ParamDomain::LogUniform { lo: 1e-4, hi: 1e-2 }),
            ("batch_size".to_string(), ParamDomain::Choice { values: vec![32.0, 64.0, 128.0] }),
        ];
        match architecture {
            Architecture::Stacked => {
                space.push(("layers".to_string(), ParamDomain::Choice { values: vec![2.0, 3.0] }))
            }
            Architecture::Conv => {
                space.push(("kernel".to_string(), ParamDomain::Choice { values: vec![1.0, 3.0, 5.0] }))
            }
            _ => {}
        }
        Self {
            space,
            initial_design,
            budget,
            candidates: MIN_CANDIDATES,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.space.is_empty() {
            return Err(Error::Config("empty search space".into()));
        }
        for (n, d) in &self.space {
            d.validate(n)?;
        }
        if self.initial_design < 2 {
            return Err(Error::Config(format!("initial design {} must be at least 2", self.initial_design)));
        }
        if self.budget < self.initial_design {
            return Err(Error::Config(format!(
                "budget {} is smaller than the initial design {}",
                self.budget, self.initial_design
            )));
        }
        Ok(())
    }

    fn decode(&self, u: &[f64]) -> HyperConfig {
        self.space
            .iter()
            .zip(u)
            .map(|((n, d), x)| (n.clone(), d.decode(*x)))
            .collect()
    }

    fn encode(&self, c: &HyperConfig) -> Vec<f64> {
        self.space.iter().map(|(n, d)| d.encode(c[n])).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub index: usize,
    pub config: HyperConfig,
    /// Objective, or [`PENALTY`] when the objective was not finite.
    pub value: f64,
    pub penalized: bool,
    /// Best value seen so far, including this entry.
    pub incumbent_value: f64,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperoptResult {
    pub best: HyperConfig,
    pub best_value: f64,
    pub trace: Vec<TraceEntry>,
}

struct Gp {
    xs: Vec<Vec<f64>>,
    alpha: DVector<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    ell: f64,
    mean: f64,
    sd: f64,
}

fn rbf(a: &[f64], b: &[f64], ell: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-0.5 * d2 / (ell * ell)).exp()
}

impl Gp {
    /// Fits a unit-variance RBF GP on standardized targets, picking the
    /// length scale with the best marginal likelihood.
    fn fit(xs: &[Vec<f64>], ys: &[f64]) -> Option<Self> {
        let n = ys.len();
        let mean = ys.iter().sum::<f64>() / n as f64;
        let var = ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n as f64;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        let z = DVector::from_iterator(n, ys.iter().map(|y| (y - mean) / sd));
        let mut best: Option<(f64, Gp)> = None;
        for ell in LENGTH_SCALES {
            let k = DMatrix::from_fn(n, n, |i, j| {
                rbf(&xs[i], &xs[j], ell) + if i == j { GP_JITTER } else { 0.0 }
            });
            let Some(chol) = k.cholesky() else { continue };
            let alpha = chol.solve(&z);
            let logdet: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
            let lml = -0.5 * z.dot(&alpha) - 0.5 * logdet;
            if best.as_ref().is_none_or(|(b, _)| lml > *b) {
                best = Some((
                    lml,
                    Gp {
                        xs: xs.to_vec(),
                        alpha,
                        chol,
                        ell,
                        mean,
                        sd,
                    },
                ));
            }
        }
        best.map(|(_, g)| g)
    }

    /// Posterior mean and standard deviation in objective units.
    fn predict(&self, x: &[f64]) -> (f64, f64) {
        let k = DVector::from_iterator(self.xs.len(), self.xs.iter().map(|xi| rbf(xi, x, self.ell)));
        let mu = k.dot(&self.alpha);
        let v = self.chol.solve(&k);
        let var = (1.0 - k.dot(&v)).max(0.0);
        (self.mean + self.sd * mu, self.sd * var.sqrt())
    }
}

fn expected_improvement(mu: f64, sigma: f64, best: f64, normal: &Normal) -> f64 {
    if sigma <= 1e-12 {
        return (best - mu).max(0.0);
    }
    let z = (best - mu) / sigma;
    (best - mu) * normal.cdf(z) + sigma * normal.pdf(z)
}

/// Minimizes `objective` over `spec.space`: a random initial design, then
/// expected-improvement steps on a Gaussian-process surrogate.
pub fn bayes_opt<F>(mut objective: F, spec: &HyperoptSpec) -> Result<HyperoptResult>
where
    F: FnMut(&HyperConfig) -> f64,
{
    spec.validate()?;
    let dims = spec.space.len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::standard();
    let mut xs: Vec<Vec<f64>> = Vec::new();
    let mut raw: Vec<f64> = Vec::new();
    let mut trace: Vec<TraceEntry> = Vec::new();
    let mut incumbent: Option<(HyperConfig, f64)> = None;

    for index in 0..spec.budget {
        let u: Vec<f64> = if index < spec.initial_design {
            (0..dims).map(|_| rng.random::<f64>()).collect()
        } else {
            let worst = raw.iter().copied().filter(|v| v.is_finite()).fold(f64::NAN, f64::max);
            let worst = if worst.is_nan() { 1.0 } else { worst };
            let ys: Vec<f64> = raw.iter().map(|v| if v.is_finite() { *v } else { worst }).collect();
            let best_y = ys.iter().copied().fold(f64::INFINITY, f64::min);
            let gp = Gp::fit(&xs, &ys);
            let mut top: Option<(f64, Vec<f64>)> = None;
            for _ in 0..spec.candidates.max(MIN_CANDIDATES) {
                let c: Vec<f64> = (0..dims).map(|_| rng.random::<f64>()).collect();
                let ei = match &gp {
                    Some(g) => {
                        let (mu, s) = g.predict(&c);
                        expected_improvement(mu, s, best_y, &normal)
                    }
                    None => 0.0,
                };
                if top.as_ref().is_none_or(|(b, _)| ei > *b) {
                    top = Some((ei, c));
                }
            }
            top.expect("at least one candidate").1
        };
        let config = spec.decode(&u);
        let v = objective(&config);
        let penalized = !v.is_finite();
        xs.push(spec.encode(&config));
        raw.push(if penalized { f64::NAN } else { v });
        let value = if penalized { PENALTY } else { v };
        if !penalized && incumbent.as_ref().is_none_or(|(_, b)| v < *b) {
            incumbent = Some((config.clone(), v));
        }
        trace.push(TraceEntry {
            index,
            config,
            value,
            penalized,
            incumbent_value: incumbent.as_ref().map_or(PENALTY, |(_, b)| *b),
            timestamp: Utc::now(),
        });
    }
    let (best, best_value) = match incumbent {
        Some(x) => x,
        None => {
            return Err(Error::InvalidArgument(
                "objective was non-finite at every evaluated point".into(),
            ))
        }
    };
    Ok(HyperoptResult {
        best,
        best_value,
        trace,
    })
}

pub fn write_trace_jsonl(trace: &[TraceEntry], mut w: impl Write) -> Result<()> {
    for e in trace {
        serde_json::to_writer(&mut w, e)?;
        writeln!(w).map_err(|e| Error::io("hyperopt trace", e))?;
    }
    Ok(())
}

/// Applies a sampled configuration to a shape and training config.
pub fn apply_hyper(config: &HyperConfig, shape: &mut ModelShape, train: &mut TrainConfig) {
    if let Some(h) = config.get("hidden") {
        shape.hidden = *h as usize;
    }
    if let Some(l) = config.get("layers") {
        shape.layers = *l as usize;
    }
    if let Some(k) = config.get("kernel") {
        shape.kernel = *k as usize;
    }
    if let Some(lr) = config.get("learning_rate") {
        train.learning_rate = *lr;
    }
    if let Some(b) = config.get("batch_size") {
        train.batch_size = *b as usize;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{FeatureMatrix, WindowedDataset};
    use chrono::{Duration, TimeZone};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn worked_metric_example() {
        let m = metrics(&[1.0, 4.0, 8.0], &[2.0, 4.0, 6.0], &ColumnScale::identity("y")).unwrap();
        assert!(close(m.mse, 5.0 / 3.0, 1e-12));
        assert!(close(m.rmse, 1.29099, 1e-5));
        assert!(close(m.mae, 1.0, 1e-12));
        assert!(close(m.mape.unwrap(), 27.77778, 1e-5));
        assert!(close(m.r2.unwrap(), 0.375, 1e-12));
    }

    #[test]
    fn perfect_and_degenerate_metrics() {
        let a = [3.0, 1.0, 2.0];
        let m = metrics(&a, &a, &ColumnScale::identity("y")).unwrap();
        assert_eq!((m.mse, m.mape, m.r2), (0.0, Some(0.0), Some(1.0)));
        let c = metrics(&[1.0, 2.0], &[5.0, 5.0], &ColumnScale::identity("y")).unwrap();
        assert_eq!(c.r2, None);
        let z = metrics(&[1.0, 2.0], &[0.0, 5.0], &ColumnScale::identity("y")).unwrap();
        assert_eq!(z.mape, None);
        assert!(metrics(&[1.0], &[1.0], &ColumnScale::identity("y")).is_err());
    }

    #[test]
    fn scaled_errors_divide_by_range() {
        let s = ColumnScale { name: "y".into(), min: 10.0, max: 20.0 };
        let m = metrics(&[11.0, 12.0], &[12.0, 12.0], &s).unwrap();
        assert!(close(m.mse, 0.005, 1e-15));
        assert!(close(m.mae, 0.05, 1e-15));
    }

    #[test]
    fn fold_boundary_example() {
        assert_eq!(
            fold_boundaries(6000, 3).unwrap(),
            vec![(3000, 4000), (4000, 5000), (5000, 6000)]
        );
        assert!(fold_boundaries(6000, 1).is_err());
        assert!(fold_boundaries(3, 2).is_err());
        for (t, v) in fold_boundaries(1234, 4).unwrap() {
            assert!(t < v && v <= 1234);
        }
    }

    #[test]
    fn cv_with_perfect_model_is_zero() {
        let r = forward_chain_cv_with(600, 3, |_, t, v| {
            let se: f64 = (t..v).map(|i| (i as f64).sin() - (i as f64).sin()).map(|e| e * e).sum();
            Ok(se / (v - t) as f64)
        })
        .unwrap();
        assert!(r.mean_mse < 1e-10);
        assert_eq!(r.fold_mse.len(), 3);
    }

    fn toy_dataset(n: usize, d: usize, w: usize, t_of: impl Fn(usize) -> f64, offset_s: i64) -> WindowedDataset {
        let t0 = Utc.with_ymd_and_hms(2021, 1, 1, 0, 0, 0).unwrap() + Duration::seconds(offset_s);
        let rows = n + w;
        let values: Vec<f64> = (0..rows * d).map(|i| ((i * 37) % 101) as f64 / 101.0).collect();
        let m = FeatureMatrix {
            timestamps: (0..rows).map(|i| t0 + Duration::seconds(300 * i as i64)).collect(),
            names: (0..d).map(|j| format!("x{j}")).collect(),
            values,
            warmup_rows: 0,
            out_of_range: 0,
            target: None,
        };
        let tgt: Vec<f64> = (0..rows).map(&t_of).collect();
        window(&m, &tgt, w, "y").unwrap()
    }

    #[test]
    fn constant_target_is_learned() {
        let tr = toy_dataset(64, 3, 4, |_| 0.42, 0);
        let va = toy_dataset(32, 3, 4, |_| 0.42, 86_400);
        let net = Network::build(NetworkSpec::new(Architecture::Basic, 3, 4), 3).unwrap();
        let cfg = TrainConfig {
            batch_size: 4,
            max_epochs: 50,
            patience: 50,
            learning_rate: 0.03,
            ..TrainConfig::default()
        };
        let out = train(net, &tr, &va, &cfg, None).unwrap();
        assert!(out.best_val_loss < 1e-6, "val {}", out.best_val_loss);
    }

    #[test]
    fn patience_one_stops_after_second_epoch() {
        let tr = toy_dataset(64, 2, 3, |_| 1.0, 0);
        let va = toy_dataset(16, 2, 3, |_| -1.0, 86_400);
        let net = Network::build(NetworkSpec::new(Architecture::Basic, 2, 3), 1).unwrap();
        let cfg = TrainConfig {
            batch_size: 8,
            patience: 1,
            learning_rate: 0.01,
            ..TrainConfig::default()
        };
        let out = train(net, &tr, &va, &cfg, None).unwrap();
        assert_eq!(out.history.len(), 2);
        assert!(out.history[1].val_loss > out.history[0].val_loss);
        assert_eq!(out.best_epoch, 1);
        let again = dataset_mse(&out.network, &va).unwrap();
        assert_eq!(again.to_bits(), out.history[0].val_loss.to_bits());
    }

    #[test]
    fn training_is_reproducible() {
        let tr = toy_dataset(40, 2, 3, |i| (i as f64 * 0.3).sin(), 0);
        let va = toy_dataset(16, 2, 3, |i| (i as f64 * 0.3).sin(), 86_400);
        let cfg = TrainConfig {
            batch_size: 8,
            max_epochs: 3,
            ..TrainConfig::default()
        };
        let run = || {
            let net = Network::build(NetworkSpec::new(Architecture::Stacked, 2, 3), 4).unwrap();
            train(net, &tr, &va, &cfg, None).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.history, b.history);
        assert_eq!(a.network, b.network);
    }

    #[test]
    fn mismatched_width_and_order_are_rejected() {
        let tr = toy_dataset(10, 2, 2, |_| 0.0, 86_400);
        let va = toy_dataset(10, 2, 2, |_| 0.0, 0);
        let net = Network::build(NetworkSpec::new(Architecture::Basic, 2, 2), 0).unwrap();
        assert!(matches!(
            train(net, &tr, &va, &TrainConfig::default(), None),
            Err(Error::Ordering(_))
        ));
        let net3 = Network::build(NetworkSpec::new(Architecture::Basic, 3, 2), 0).unwrap();
        assert!(matches!(
            train(net3, &va, &tr, &TrainConfig::default(), None),
            Err(Error::Shape(_))
        ));
    }

    fn quad_spec(seed: u64, budget: usize, design: usize) -> HyperoptSpec {
        HyperoptSpec {
            space: vec![("x".into(), ParamDomain::Uniform { lo: 0.0, hi: 1.0 })],
            initial_design: design,
            budget,
            candidates: 1024,
            seed,
        }
    }

    #[test]
    fn bayes_opt_finds_quadratic_minimum() {
        let r = bayes_opt(|c| (c["x"] - 0.3).powi(2), &quad_spec(3, 20, 5)).unwrap();
        assert!((r.best["x"] - 0.3).abs() < 0.05, "best {:?}", r.best);
        assert!(r.trace.windows(2).all(|w| w[1].incumbent_value <= w[0].incumbent_value));
    }

    #[test]
    fn bayes_opt_budget_equal_design_is_random_search() {
        let r = bayes_opt(|c| (c["x"] - 0.3).powi(2), &quad_spec(1, 5, 5)).unwrap();
        let min = r.trace.iter().map(|e| e.value).fold(f64::INFINITY, f64::min);
        assert_eq!(r.best_value, min);
        assert_eq!(r.trace.len(), 5);
    }

    #[test]
    fn bayes_opt_penalizes_non_finite_points() {
        let r = bayes_opt(
            |c| if c["x"] > 0.5 { f64::NAN } else { (c["x"] - 0.3).powi(2) },
            &quad_spec(2, 12, 4),
        )
        .unwrap();
        assert!(r.best_value.is_finite());
        assert!(r.trace.iter().filter(|e| e.penalized).all(|e| e.value == PENALTY));
    }

    #[test]
    fn bayes_opt_trace_is_reproducible() {
        let f = |c: &HyperConfig| (c["x"] - 0.7).abs();
        let a = bayes_opt(f, &quad_spec(9, 10, 3)).unwrap();
        let b = bayes_opt(f, &quad_spec(9, 10, 3)).unwrap();
        let strip = |r: &HyperoptResult| r.trace.iter().map(|e| (e.config.clone(), e.value)).collect::<Vec<_>>();
        assert_eq!(strip(&a), strip(&b));
    }

    #[test]
    fn domains_round_trip_through_unit_coordinates() {
        let d = ParamDomain::Integer { lo: 16, hi: 128 };
        assert_eq!(d.decode(0.0), 16.0);
        assert_eq!(d.decode(1.0), 128.0);
        assert_eq!(d.decode(d.encode(77.0)), 77.0);
        let c = ParamDomain::Choice { values: vec![32.0, 64.0, 128.0] };
        assert_eq!(c.decode(c.encode(64.0)), 64.0);
        let l = ParamDomain::LogUniform { lo: 1e-4, hi: 1e-2 };
        assert!((l.decode(0.5) - 1e-3).abs() < 1e-15);
        assert!(HyperoptSpec::lstm(Architecture::Conv, 4, 5, 0).validate().is_err());
    }
}
