//! Counterfactual interventions: scale one or two raw inputs, forecast, and
//! compare against the model's own unperturbed forecast.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::ops::Range;

use chrono::{DateTime, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::architectures::TrainedModel;
use crate::error::{Error, Result};
use crate::forecast::{forecast, ForecastMode, ForecastRequest};
use crate::ingest::TimeSeriesFrame;

/// Sweep deltas, as exact decimal literals.
pub const SWEEP_DELTAS: [f64; 9] = [-0.20, -0.15, -0.10, -0.05, 0.0, 0.05, 0.10, 0.15, 0.20];
pub const MAX_ABS_DELTA: f64 = 0.20;
pub const MAX_INTERVENTIONS: usize = 2;
/// Default evaluation window length in days.
pub const DEFAULT_WINDOW_DAYS: usize = 2;
const BASELINE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intervention {
    pub feature: String,
    /// Signed fraction; 0.1 scales the feature by 1.1.
    pub delta: f64,
}

impl Intervention {
    pub fn new(feature: &str, delta: f64) -> Self {
        Self {
            feature: feature.to_string(),
            delta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub interventions: Vec<Intervention>,
    /// Frame row of the first evaluated step.
    pub start: usize,
    pub length: usize,
}

/// Rejects unknown or duplicated features and out-of-range deltas.
pub fn validate_interventions(interventions: &[Intervention], allowed: &[String]) -> Result<()> {
    if interventions.len() > MAX_INTERVENTIONS {
        return Err(Error::InvalidArgument(format!(
            "at most {MAX_INTERVENTIONS} interventions, got {}",
            interventions.len()
        )));
    }
    let mut seen = BTreeSet::new();
    for (i, iv) in interventions.iter().enumerate() {
        if !allowed.contains(&iv.feature) {
            return Err(Error::UnknownName(format!("intervention {i}: feature `{}`", iv.feature)));
        }
        if !seen.insert(iv.feature.as_str()) {
            return Err(Error::InvalidArgument(format!(
                "intervention {i}: feature `{}` appears twice",
                iv.feature
            )));
        }
        if !(iv.delta.is_finite() && iv.delta.abs() <= MAX_ABS_DELTA) {
            return Err(Error::InvalidArgument(format!(
                "intervention {i}: delta {} outside [-{MAX_ABS_DELTA}, {MAX_ABS_DELTA}]",
                iv.delta
            )));
        }
    }
    Ok(())
}

/// Rows a forecast over `[start, start + length)` reads: the window plus
/// the input window and feature warm-up before it.
pub fn affected_rows(model: &TrainedModel, start: usize, length: usize) -> Range<usize> {
    let fc = &model.descriptor.feature_config;
    start.saturating_sub(fc.window + fc.warmup_rows())..start + length
}

/// Scales each named column by `1 + delta` over `rows`; other columns and
/// rows are untouched, and a zero delta leaves the frame unchanged.
pub fn perturb(frame: &TimeSeriesFrame, interventions: &[Intervention], rows: Range<usize>) -> Result<TimeSeriesFrame> {
    if rows.end > frame.len() || rows.start > rows.end {
        return Err(Error::InvalidArgument(format!(
            "rows {rows:?} outside a frame of {} rows",
            frame.len()
        )));
    }
    let mut seen = BTreeSet::new();
    let mut out = frame.clone();
    for iv in interventions {
        if !seen.insert(iv.feature.as_str()) {
            return Err(Error::InvalidArgument(format!("feature `{}` perturbed twice", iv.feature)));
        }
        let col = frame
            .column(&iv.feature)
            .ok_or_else(|| Error::UnknownName(format!("feature `{}`", iv.feature)))?;
        if iv.delta == 0.0 {
            continue;
        }
        let factor = 1.0 + iv.delta;
        let mut values = col.to_vec();
        for v in &mut values[rows.clone()] {
            *v *= factor;
        }
        out = out.with_column(&iv.feature, values)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpactResult {
    pub target: String,
    pub timestamps: Vec<DateTime<Utc>>,
    pub baseline: Vec<f64>,
    pub counterfactual: Vec<f64>,
    /// Mean per-step percent change of the counterfactual over the baseline.
    pub impact_pct: f64,
}

/// The model's unperturbed exogenous forecast over the window.
pub fn baseline(model: &TrainedModel, frame: &TimeSeriesFrame, start: usize, length: usize) -> Result<Vec<f64>> {
    let r = forecast(
        model,
        frame,
        &ForecastRequest {
            start,
            horizon: length,
            mode: ForecastMode::Exogenous,
        },
    )?;
    for (step, v) in r.predicted.iter().enumerate() {
        if v.abs() <= BASELINE_EPS {
            return Err(Error::UndefinedImpact { step, value: *v });
        }
    }
    Ok(r.predicted)
}

/// Mean of `100 * (pert - base) / base`.
pub fn mean_pct_change(base: &[f64], pert: &[f64]) -> Result<f64> {
    if base.len() != pert.len() || base.is_empty() {
        return Err(Error::Shape(format!("{} baseline vs {} perturbed steps", base.len(), pert.len())));
    }
    let mut total = 0.0;
    for (step, (b, p)) in base.iter().zip(pert).enumerate() {
        if b.abs() <= BASELINE_EPS {
            return Err(Error::UndefinedImpact { step, value: *b });
        }
        total += 100.0 * (p - b) / b;
    }
    Ok(total / base.len() as f64)
}

fn counterfactual(
    model: &TrainedModel,
    frame: &TimeSeriesFrame,
    interventions: &[Intervention],
    start: usize,
    length: usize,
    base: &[f64],
) -> Result<Vec<f64>> {
    if interventions.iter().all(|iv| iv.delta == 0.0) {
        return Ok(base.to_vec());
    }
    let pert = perturb(frame, interventions, affected_rows(model, start, length))?;
    Ok(forecast(
        model,
        &pert,
        &ForecastRequest {
            start,
            horizon: length,
            mode: ForecastMode::Exogenous,
        },
    )?
    .predicted)
}

/// Average percent change of the target forecast under `spec`.
pub fn impact(model: &TrainedModel, frame: &TimeSeriesFrame, spec: &InterventionSpec) -> Result<ImpactResult> {
    validate_interventions(&spec.interventions, &model.descriptor.feature_config.inputs)?;
    let base = baseline(model, frame, spec.start, spec.length)?;
    let cf = counterfactual(model, frame, &spec.interventions, spec.start, spec.length, &base)?;
    let impact_pct = mean_pct_change(&base, &cf)?;
    Ok(ImpactResult {
        target: model.descriptor.target.clone(),
        timestamps: frame.timestamps()[spec.start..spec.start + spec.length].to_vec(),
        baseline: base,
        counterfactual: cf,
        impact_pct,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    Single,
    Pair,
}

/// One grid cell: an impact or the error that prevented it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub impact_pct: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl GridCell {
    fn from_result(r: Result<f64>) -> Self {
        match r {
            Ok(v) => Self {
                impact_pct: Some(v),
                error: None,
            },
            Err(e) => Self {
                impact_pct: None,
                error: Some(e.to_string()),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpactGrid {
    pub kind: GridKind,
    pub target: String,
    pub model: String,
    pub start: usize,
    pub length: usize,
    /// Single: one swept feature per row. Pair: `[row feature, column feature]`.
    pub features: Vec<String>,
    /// Pair only: deltas of the row feature.
    pub row_deltas: Vec<f64>,
    /// Column deltas (of the column feature, for pair grids).
    pub col_deltas: Vec<f64>,
    pub cells: Vec<Vec<GridCell>>,
}

impl ImpactGrid {
    pub fn shape(&self) -> (usize, usize) {
        (self.cells.len(), self.cells.first().map_or(0, Vec::len))
    }

    pub fn cell_count(&self) -> usize {
        self.cells.iter().map(Vec::len).sum()
    }

    pub fn value(&self, row: usize, col: usize) -> Option<f64> {
        self.cells.get(row)?.get(col)?.impact_pct
    }

    fn row_labels(&self) -> Vec<String> {
        match self.kind {
            GridKind::Single => self.features.clone(),
            GridKind::Pair => self.row_deltas.iter().map(f64::to_string).collect(),
        }
    }

    /// Matrix CSV: `#` metadata lines, a header of column deltas, then one
    /// labelled row per feature (single) or row delta (pair). Error cells
    /// are written as `error:<message>`.
    pub fn write_csv_to<W: Write>(&self, mut w: W) -> Result<()> {
        let meta = [
            ("kind", serde_json::to_string(&self.kind)?),
            ("target", self.target.clone()),
            ("model", self.model.clone()),
            ("start", self.start.to_string()),
            ("length", self.length.to_string()),
            ("features", self.features.join(";")),
        ];
        for (k, v) in meta {
            writeln!(w, "# {k}={v}").map_err(|e| Error::io("grid csv", e))?;
        }
        let mut out = csv::WriterBuilder::new().from_writer(w);
        let corner = match self.kind {
            GridKind::Single => "feature".to_string(),
            GridKind::Pair => format!("{}\\{}", self.features[0], self.features[1]),
        };
        let mut header = vec![corner];
        header.extend(self.col_deltas.iter().map(f64::to_string));
        out.write_record(&header)?;
        for (label, row) in self.row_labels().into_iter().zip(&self.cells) {
            let mut rec = vec![label];
            rec.extend(row.iter().map(|c| match (&c.impact_pct, &c.error) {
                (Some(v), _) => v.to_string(),
                (None, Some(e)) => format!("error:{e}"),
                (None, None) => String::new(),
            }));
            out.write_record(&rec)?;
        }
        out.flush().map_err(|e| Error::io("grid csv", e))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv_to(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Corrupt(e.to_string()))
    }

    pub fn read_csv<R: Read>(mut r: R) -> Result<Self> {
        let mut text = String::new();
        r.read_to_string(&mut text).map_err(|e| Error::io("grid csv", e))?;
        let mut meta = std::collections::BTreeMap::new();
        let mut body = String::new();
        for line in text.split_inclusive('\n') {
            match line.strip_prefix("# ") {
                Some(m) => {
                    let (k, v) = m
                        .trim_end_matches(['\n', '\r'])
                        .split_once('=')
                        .ok_or_else(|| Error::Corrupt(format!("bad metadata line `{line}`")))?;
                    meta.insert(k.to_string(), v.to_string());
                }
                None => body.push_str(line),
            }
        }
        let get = |k: &str| {
            meta.get(k)
                .cloned()
                .ok_or_else(|| Error::Corrupt(format!("grid csv lacks `{k}`")))
        };
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::Corrupt(format!("`{s}` is not a number")))
        };
        let kind: GridKind = serde_json::from_str(&get("kind")?)?;
        let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(body.as_bytes());
        let col_deltas = rd
            .headers()?
            .iter()
            .skip(1)
            .map(num)
            .collect::<Result<Vec<_>>>()?;
        let mut labels = Vec::new();
        let mut cells = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            labels.push(rec.get(0).unwrap_or_default().to_string());
            cells.push(
                rec.iter()
                    .skip(1)
                    .map(|c| {
                        Ok(if let Some(e) = c.strip_prefix("error:") {
                            GridCell {
                                impact_pct: None,
                                error: Some(e.to_string()),
                            }
                        } else if c.is_empty() {
                            GridCell {
                                impact_pct: None,
                                error: None,
                            }
                        } else {
                            GridCell {
                                impact_pct: Some(num(c)?),
                                error: None,
                            }
                        })
                    })
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        let features: Vec<String> = get("features")?.split(';').map(str::to_string).collect();
        let row_deltas = match kind {
            GridKind::Single => Vec::new(),
            GridKind::Pair => labels.iter().map(|l| num(l)).collect::<Result<_>>()?,
        };
        Ok(Self {
            kind,
            target: get("target")?,
            model: get("model")?,
            start: get("start")?.parse().map_err(|_| Error::Corrupt("bad start".into()))?,
            length: get("length")?.parse().map_err(|_| Error::Corrupt("bad length".into()))?,
            features,
            row_deltas,
            col_deltas,
            cells,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Evaluation window shared by every cell of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepWindow {
    pub start: usize,
    pub length: usize,
}

fn fill_cells(
    model: &TrainedModel,
    frame: &TimeSeriesFrame,
    window: SweepWindow,
    base: &[f64],
    jobs: Vec<Vec<Intervention>>,
) -> Vec<GridCell> {
    jobs.par_iter()
        .map(|ivs| {
            GridCell::from_result(
                counterfactual(model, frame, ivs, window.start, window.length, base)
                    .and_then(|cf| mean_pct_change(base, &cf)),
            )
        })
        .collect()
}

/// `features.len() x 9` grid of single-feature impacts. With `features`
/// empty, every model input is swept.
pub fn sweep_single(
    model: &TrainedModel,
    model_id: &str,
    frame: &TimeSeriesFrame,
    features: &[String],
    window: SweepWindow,
) -> Result<ImpactGrid> {
    let inputs = &model.descriptor.feature_config.inputs;
    let features: Vec<String> = if features.is_empty() { inputs.clone() } else { features.to_vec() };
    for f in &features {
        validate_interventions(&[Intervention::new(f, 0.0)], inputs)?;
    }
    let base = baseline(model, frame, window.start, window.length)?;
    let jobs = features
        .iter()
        .flat_map(|f| SWEEP_DELTAS.iter().map(move |d| vec![Intervention::new(f, *d)]))
        .collect();
    let flat = fill_cells(model, frame, window, &base, jobs);
    Ok(ImpactGrid {
        kind: GridKind::Single,
        target: model.descriptor.target.clone(),
        model: model_id.to_string(),
        start: window.start,
        length: window.length,
        features,
        row_deltas: Vec::new(),
        col_deltas: SWEEP_DELTAS.to_vec(),
        cells: flat.chunks(SWEEP_DELTAS.len()).map(<[GridCell]>::to_vec).collect(),
    })
}

/// 9 x 9 grid over simultaneous deltas of `feature_a` (rows) and
/// `feature_b` (columns).
pub fn sweep_pair(
    model: &TrainedModel,
    model_id: &str,
    frame: &TimeSeriesFrame,
    feature_a: &str,
    feature_b: &str,
    window: SweepWindow,
) -> Result<ImpactGrid> {
    if feature_a == feature_b {
        return Err(Error::InvalidArgument(format!("pair sweep needs two distinct features, got `{feature_a}` twice")));
    }
    validate_interventions(
        &[Intervention::new(feature_a, 0.0), Intervention::new(feature_b, 0.0)],
        &model.descriptor.feature_config.inputs,
    )?;
    let base = baseline(model, frame, window.start, window.length)?;
    let mut jobs = Vec::new();
    for da in SWEEP_DELTAS {
        for db in SWEEP_DELTAS {
            jobs.push(vec![Intervention::new(feature_a, da), Intervention::new(feature_b, db)]);
        }
    }
    let flat = fill_cells(model, frame, window, &base, jobs);
    Ok(ImpactGrid {
        kind: GridKind::Pair,
        target: model.descriptor.target.clone(),
        model: model_id.to_string(),
        start: window.start,
        length: window.length,
        features: vec![feature_a.to_string(), feature_b.to_string()],
        row_deltas: SWEEP_DELTAS.to_vec(),
        col_deltas: SWEEP_DELTAS.to_vec(),
        cells: flat.chunks(SWEEP_DELTAS.len()).map(<[GridCell]>::to_vec).collect(),
    })
}

/// Index of `0.0` in [`SWEEP_DELTAS`].
pub const ZERO_DELTA_INDEX: usize = 4;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::architectures::{Architecture, ModelDescriptor, Network, NetworkSpec, TrainingMetadata};
    use crate::features::{engineer, fit_feature_scaler, FeatureConfig};
    use crate::synthplant::{generate, GeneratorConfig};

    fn setup() -> (TrainedModel, TimeSeriesFrame) {
        let frame = generate(&GeneratorConfig::cesar1(3, 2.0)).unwrap();
        let fc = FeatureConfig::hourly(300, 4);
        let scaler = fit_feature_scaler(&frame.slice(0..300), &fc, "amp_ftir").unwrap();
        let spec = NetworkSpec::new(Architecture::Basic, fc.feature_count("amp_ftir"), 4);
        let model = TrainedModel {
            descriptor: ModelDescriptor::new(spec, "amp_ftir", fc, scaler).unwrap(),
            network: Network::build(spec, 8).unwrap(),
            metadata: TrainingMetadata {
                seed: 8,
                deterministic: true,
                epochs_run: 0,
                best_epoch: 0,
                best_val_loss: 0.0,
                data_span: None,
                dataset_id: None,
            },
        };
        (model, frame)
    }

    const WIN: SweepWindow = SweepWindow { start: 300, length: 40 };

    #[test]
    fn perturb_scales_only_the_named_rows() {
        let (_, f) = setup();
        let p = perturb(&f, &[Intervention::new("lean_solvent_temp", 0.1)], 10..20).unwrap();
        let (a, b) = (f.column("lean_solvent_temp").unwrap(), p.column("lean_solvent_temp").unwrap());
        for i in 0..f.len() {
            let want = if (10..20).contains(&i) { a[i] * 1.1 } else { a[i] };
            assert_eq!(b[i], want);
        }
        assert_eq!(p.column("fg_inlet_flow"), f.column("fg_inlet_flow"));
        let z = perturb(&f, &[Intervention::new("lean_solvent_temp", 0.0)], 0..f.len()).unwrap();
        assert_eq!(z, f);
        assert!(perturb(&f, &[Intervention::new("nope", 0.1)], 0..5).is_err());
        assert!(perturb(
            &f,
            &[Intervention::new("fg_inlet_flow", 0.1), Intervention::new("fg_inlet_flow", 0.1)],
            0..5
        )
        .is_err());
    }

    #[test]
    fn perturbed_features_are_homogeneous_and_local() {
        let (m, f) = setup();
        let fc = &m.descriptor.feature_config;
        let rows = 100..300;
        let p = perturb(&f, &[Intervention::new("upper_ww_temp", 0.15)], rows.clone()).unwrap();
        let (eb, ep) = (engineer(&f, fc, "amp_ftir").unwrap(), engineer(&p, fc, "amp_ftir").unwrap());
        let interior = rows.start + fc.warmup_rows()..rows.end;
        for name in eb.column_names() {
            let (b, q) = (eb.column(name).unwrap(), ep.column(name).unwrap());
            if name.starts_with("upper_ww_temp") {
                for i in interior.clone() {
                    assert!((q[i] - 1.15 * b[i]).abs() <= 1e-9 * b[i].abs().max(1.0), "{name} row {i}");
                }
            } else {
                assert!(b.iter().zip(q).all(|(x, y)| x.to_bits() == y.to_bits()), "{name}");
            }
        }
    }

    #[test]
    fn zero_intervention_has_zero_impact() {
        let (m, f) = setup();
        let spec = InterventionSpec { interventions: vec![], start: WIN.start, length: WIN.length };
        let r = impact(&m, &f, &spec).unwrap();
        assert_eq!(r.impact_pct, 0.0);
        assert_eq!(r.baseline, r.counterfactual);
        let zero = InterventionSpec {
            interventions: vec![Intervention::new("fg_inlet_flow", 0.0)],
            ..spec
        };
        assert_eq!(impact(&m, &f, &zero).unwrap().impact_pct, 0.0);
    }

    #[test]
    fn invalid_interventions_are_rejected() {
        let (m, f) = setup();
        let bad = |ivs: Vec<Intervention>| {
            impact(&m, &f, &InterventionSpec { interventions: ivs, start: WIN.start, length: WIN.length }).is_err()
        };
        assert!(bad(vec![Intervention::new("fg_inlet_flow", 0.25)]));
        assert!(bad(vec![Intervention::new("amp_ftir", 0.1)]));
        assert!(bad(vec![
            Intervention::new("fg_inlet_flow", 0.1),
            Intervention::new("fg_inlet_temp", 0.1),
            Intervention::new("lean_solvent_flow", 0.1)
        ]));
    }

    #[test]
    fn grids_have_the_documented_shapes_and_agree() {
        let (m, f) = setup();
        let single = sweep_single(&m, "m", &f, &[], WIN).unwrap();
        assert_eq!(single.shape(), (8, 9));
        assert!(single.cells.iter().all(|r| r[ZERO_DELTA_INDEX].impact_pct == Some(0.0)));
        let pair = sweep_pair(&m, "m", &f, "lean_solvent_temp", "upper_ww_temp", WIN).unwrap();
        assert_eq!(pair.shape(), (9, 9));
        assert_eq!(pair.value(ZERO_DELTA_INDEX, ZERO_DELTA_INDEX), Some(0.0));
        let row = single.features.iter().position(|x| x == "lean_solvent_temp").unwrap();
        for (k, _) in SWEEP_DELTAS.iter().enumerate() {
            let a = pair.value(k, ZERO_DELTA_INDEX).unwrap();
            let b = single.value(row, k).unwrap();
            assert!((a - b).abs() <= 1e-12);
        }
        let spec = InterventionSpec {
            interventions: vec![Intervention::new("lean_solvent_temp", 0.1)],
            start: WIN.start,
            length: WIN.length,
        };
        assert_eq!(impact(&m, &f, &spec).unwrap().impact_pct, single.value(row, 6).unwrap());
    }

    #[test]
    fn cell_errors_stay_in_their_cell() {
        let (m, f) = setup();
        let mut grid = sweep_single(&m, "m", &f, &["fg_inlet_flow".to_string()], WIN).unwrap();
        grid.cells[0][1] = GridCell::from_result(Err(Error::UndefinedImpact { step: 3, value: 0.0 }));
        let back = ImpactGrid::read_csv(grid.to_csv_string().unwrap().as_bytes()).unwrap();
        assert_eq!(back, grid);
    }

    #[test]
    fn exports_round_trip_losslessly() {
        let (m, f) = setup();
        let pair = sweep_pair(&m, "model-1", &f, "fg_inlet_temp", "lower_ww_flow", WIN).unwrap();
        assert_eq!(ImpactGrid::read_csv(pair.to_csv_string().unwrap().as_bytes()).unwrap(), pair);
        assert_eq!(ImpactGrid::from_json(&pair.to_json().unwrap()).unwrap(), pair);
        let single = sweep_single(&m, "model-1", &f, &[], WIN).unwrap();
        assert_eq!(ImpactGrid::read_csv(single.to_csv_string().unwrap().as_bytes()).unwrap(), single);
    }

    #[test]
    fn near_zero_baseline_is_undefined() {
        assert!(matches!(
            mean_pct_change(&[1.0, 0.0], &[1.0, 1.0]),
            Err(Error::UndefinedImpact { step: 1, .. })
        ));
        assert!((mean_pct_change(&[2.0, 4.0], &[2.2, 4.0]).unwrap() - 5.0).abs() < 1e-12);
    }
}
