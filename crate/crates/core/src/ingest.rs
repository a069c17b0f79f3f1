//! Plant telemetry ingestion: CSV parsing, gap filling, resampling,
//! concatenation and chronological splitting.
//!
//! Missing readings are stored as `NaN` inside a [`TimeSeriesFrame`]. CSV
//! blanks, non-numeric tokens and non-finite numbers all map to that marker,
//! and [`fill_missing`] removes every occurrence.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Marker stored in place of a missing reading.
pub const MISSING: f64 = f64::NAN;

#[inline]
pub fn is_missing(v: f64) -> bool {
    !v.is_finite()
}

/// Name of the mandatory first CSV column.
pub const TIMESTAMP_COLUMN: &str = "timestamp";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub unit: String,
}

impl ColumnSpec {
    fn new(name: &str, unit: &str) -> Self {
        Self {
            name: name.to_string(),
            unit: unit.to_string(),
        }
    }
}

/// Column layout of the capture plant: eight operational inputs, four amine
/// emission channels and four performance channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantSchema {
    pub inputs: Vec<ColumnSpec>,
    pub emissions: Vec<ColumnSpec>,
    pub performance: Vec<ColumnSpec>,
}

pub const INPUT_COUNT: usize = 8;
pub const EMISSION_COUNT: usize = 4;
pub const PERFORMANCE_COUNT: usize = 4;

impl Default for PlantSchema {
    fn default() -> Self {
        Self::cesar1()
    }
}

impl PlantSchema {
    /// The standard CESAR1 campaign layout.
    pub fn cesar1() -> Self {
        Self {
            inputs: vec![
                ColumnSpec::new("fg_inlet_flow", "Sm3/h"),
                ColumnSpec::new("fg_inlet_temp", "degC"),
                ColumnSpec::new("lean_solvent_flow", "kg/h"),
                ColumnSpec::new("lean_solvent_temp", "degC"),
                ColumnSpec::new("upper_ww_flow", "kg/h"),
                ColumnSpec::new("upper_ww_temp", "degC"),
                ColumnSpec::new("lower_ww_flow", "kg/h"),
                ColumnSpec::new("lower_ww_temp", "degC"),
            ],
            emissions: vec![
                ColumnSpec::new("amp_ftir", "ppmv"),
                ColumnSpec::new("amp_imrms", "ppmv"),
                ColumnSpec::new("pz_ftir", "ppmv"),
                ColumnSpec::new("pz_imrms", "ppmv"),
            ],
            performance: vec![
                ColumnSpec::new("co2_product_flow", "kg/h"),
                ColumnSpec::new("absorber_outlet_temp", "degC"),
                ColumnSpec::new("depleted_fg_temp", "degC"),
                ColumnSpec::new("stripper_bottom_temp", "degC"),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.len() != INPUT_COUNT
            || self.emissions.len() != EMISSION_COUNT
            || self.performance.len() != PERFORMANCE_COUNT
        {
            return Err(Error::Schema(format!(
                "expected {INPUT_COUNT} inputs, {EMISSION_COUNT} emissions and \
                 {PERFORMANCE_COUNT} performance columns, got {}/{}/{}",
                self.inputs.len(),
                self.emissions.len(),
                self.performance.len()
            )));
        }
        let mut seen = HashSet::new();
        for c in self.all() {
            if c.name == TIMESTAMP_COLUMN || !seen.insert(c.name.as_str()) {
                return Err(Error::Schema(format!("duplicate column name `{}`", c.name)));
            }
        }
        Ok(())
    }

    /// All columns in canonical order: inputs, emissions, performance.
    pub fn all(&self) -> impl Iterator<Item = &ColumnSpec> {
        self.inputs
            .iter()
            .chain(self.emissions.iter())
            .chain(self.performance.iter())
    }

    pub fn input_names(&self) -> Vec<String> {
        self.inputs.iter().map(|c| c.name.clone()).collect()
    }

    pub fn output_names(&self) -> Vec<String> {
        self.emissions
            .iter()
            .chain(self.performance.iter())
            .map(|c| c.name.clone())
            .collect()
    }

    pub fn all_names(&self) -> Vec<String> {
        self.all().map(|c| c.name.clone()).collect()
    }

    pub fn is_input(&self, name: &str) -> bool {
        self.inputs.iter().any(|c| c.name == name)
    }

    pub fn is_output(&self, name: &str) -> bool {
        self.emissions
            .iter()
            .chain(self.performance.iter())
            .any(|c| c.name == name)
    }

    pub fn unit(&self, name: &str) -> Option<&str> {
        self.all().find(|c| c.name == name).map(|c| c.unit.as_str())
    }
}

/// Timestamped table of named `f64` columns.
///
/// Frames are immutable once built; every transform returns a new frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesFrame {
    timestamps: Vec<DateTime<Utc>>,
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
    interval_s: i64,
    provenance: String,
}

impl TimeSeriesFrame {
    /// Builds a frame, checking that timestamps strictly increase and that
    /// every column matches the timestamp count.
    pub fn new(
        timestamps: Vec<DateTime<Utc>>,
        columns: Vec<(String, Vec<f64>)>,
        interval_s: i64,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if let Some(i) = timestamps.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::Ordering(format!(
                "timestamp {} at row {} does not follow {}",
                timestamps[i + 1],
                i + 1,
                timestamps[i]
            )));
        }
        let mut seen = HashSet::new();
        let mut names = Vec::with_capacity(columns.len());
        let mut values = Vec::with_capacity(columns.len());
        for (name, col) in columns {
            if !seen.insert(name.clone()) {
                return Err(Error::Schema(format!("duplicate column `{name}`")));
            }
            if col.len() != timestamps.len() {
                return Err(Error::Schema(format!(
                    "column `{name}` has {} values for {} timestamps",
                    col.len(),
                    timestamps.len()
                )));
            }
            names.push(name);
            values.push(col);
        }
        Ok(Self {
            timestamps,
            names,
            columns: values,
            interval_s,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn timestamps(&self) -> &[DateTime<Utc>] {
        &self.timestamps
    }

    pub fn interval_s(&self) -> i64 {
        self.interval_s
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn column_names(&self) -> &[String] {
        &self.names
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.column_index(name).map(|i| self.columns[i].as_slice())
    }

    pub fn require_column(&self, name: &str) -> Result<&[f64]> {
        self.column(name)
            .ok_or_else(|| Error::UnknownName(format!("column `{name}`")))
    }

    pub fn columns(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.columns.iter().map(Vec::as_slice))
    }

    pub fn missing_count(&self) -> usize {
        self.columns
            .iter()
            .map(|c| c.iter().filter(|v| is_missing(**v)).count())
            .sum()
    }

    /// True when every consecutive gap equals the nominal interval.
    pub fn is_regular(&self) -> bool {
        self.timestamps
            .windows(2)
            .all(|w| (w[1] - w[0]).num_seconds() == self.interval_s)
    }

    pub fn span(&self) -> Option<(DateTime<Utc>, DateTime<Utc>)> {
        Some((*self.timestamps.first()?, *self.timestamps.last()?))
    }

    /// Rows `range` as a new frame.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            timestamps: self.timestamps[range.clone()].to_vec(),
            names: self.names.clone(),
            columns: self.columns.iter().map(|c| c[range.clone()].to_vec()).collect(),
            interval_s: self.interval_s,
            provenance: self.provenance.clone(),
        }
    }

    /// Returns a copy with `name` replaced (or appended when absent).
    pub fn with_column(&self, name: &str, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.len() {
            return Err(Error::Schema(format!(
                "column `{name}` has {} values for {} rows",
                values.len(),
                self.len()
            )));
        }
        let mut out = self.clone();
        match out.column_index(name) {
            Some(i) => out.columns[i] = values,
            None => {
                out.names.push(name.to_string());
                out.columns.push(values);
            }
        }
        Ok(out)
    }

    /// Projection onto `names`, in that order.
    pub fn select(&self, names: &[String]) -> Result<Self> {
        let mut cols = Vec::with_capacity(names.len());
        for n in names {
            cols.push((n.clone(), self.require_column(n)?.to_vec()));
        }
        Self::new(
            self.timestamps.clone(),
            cols,
            self.interval_s,
            self.provenance.clone(),
        )
    }

    pub fn with_provenance(mut self, provenance: impl Into<String>) -> Self {
        self.provenance = provenance.into();
        self
    }
}

/// Parses an ISO-8601 instant; naive values are taken as UTC.
pub fn parse_timestamp(s: &str) -> Option<DateTime<Utc>> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(t.and_utc());
        }
    }
    None
}

pub fn format_timestamp(t: &DateTime<Utc>) -> String {
    t.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

fn parse_cell(s: &str) -> f64 {
    match s.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => v,
        _ => MISSING,
    }
}

/// Most frequent gap in seconds; ties go to the smaller gap.
pub fn modal_spacing(timestamps: &[DateTime<Utc>]) -> Option<i64> {
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for w in timestamps.windows(2) {
        *counts.entry((w[1] - w[0]).num_seconds()).or_default() += 1;
    }
    let max = *counts.values().max()?;
    counts.into_iter().find(|(_, c)| *c == max).map(|(gap, _)| gap)
}

/// Loads a plant CSV whose header is `timestamp` followed by the schema's
/// columns (in any order). The returned frame uses schema order.
pub fn load_csv(path: impl AsRef<Path>, schema: &PlantSchema) -> Result<TimeSeriesFrame> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let names = schema.all_names();
    read_csv(file, &names, &format!("csv:{}", path.display()))
}

/// Reads CSV text with a mandatory `timestamp` column plus exactly `expected`.
pub fn read_csv<R: Read>(reader: R, expected: &[String], provenance: &str) -> Result<TimeSeriesFrame> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);
    let header = match rdr.headers() {
        Ok(h) => h.clone(),
        Err(e) => {
            return match e.kind() {
                csv::ErrorKind::Io(_) => Err(e.into()),
                _ => Err(Error::EmptyInput(provenance.to_string())),
            }
        }
    };
    if header.is_empty() || (header.len() == 1 && header[0].trim().is_empty()) {
        return Err(Error::EmptyInput(format!("{provenance}: no header")));
    }
    let header: Vec<String> = header.iter().map(|h| h.trim().to_string()).collect();
    if header[0] != TIMESTAMP_COLUMN {
        return Err(Error::Schema(format!(
            "first column must be `{TIMESTAMP_COLUMN}`, found `{}`",
            header[0]
        )));
    }
    let mut position: HashMap<&str, usize> = HashMap::new();
    for (i, h) in header.iter().enumerate().skip(1) {
        if position.insert(h.as_str(), i).is_some() {
            return Err(Error::Schema(format!("duplicate column `{h}`")));
        }
    }
    for name in expected {
        if !position.contains_key(name.as_str()) {
            return Err(Error::Schema(format!("missing column `{name}`")));
        }
    }
    if let Some(extra) = header[1..].iter().find(|h| !expected.contains(h)) {
        return Err(Error::Schema(format!("unexpected column `{extra}`")));
    }

    let mut timestamps = Vec::new();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); expected.len()];
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        let ts = parse_timestamp(&record[0]).ok_or_else(|| {
            Error::Ordering(format!("row {row}: unparseable timestamp `{}`", &record[0]))
        })?;
        timestamps.push(ts);
        for (j, name) in expected.iter().enumerate() {
            columns[j].push(parse_cell(&record[position[name.as_str()]]));
        }
    }
    if timestamps.is_empty() {
        return Err(Error::EmptyInput(format!("{provenance}: no data rows")));
    }
    let interval = if timestamps.len() == 1 {
        0
    } else {
        modal_spacing(&timestamps).unwrap_or(0)
    };
    TimeSeriesFrame::new(
        timestamps,
        expected.iter().cloned().zip(columns).collect(),
        interval,
        provenance,
    )
}

/// Writes a frame as CSV. Missing values become blank cells; numbers use the
/// shortest representation that parses back to the same `f64`.
pub fn write_csv(frame: &TimeSeriesFrame, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv_to(frame, file)
}

pub fn write_csv_to<W: std::io::Write>(frame: &TimeSeriesFrame, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![TIMESTAMP_COLUMN.to_string()];
    header.extend(frame.names.iter().cloned());
    w.write_record(&header)?;
    let mut row = Vec::with_capacity(header.len());
    for (i, ts) in frame.timestamps.iter().enumerate() {
        row.clear();
        row.push(format_timestamp(ts));
        for col in &frame.columns {
            let v = col[i];
            row.push(if is_missing(v) { String::new() } else { v.to_string() });
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FillReport {
    pub filled_cells: usize,
}

/// Replaces missing values by time-linear interpolation between the nearest
/// observed neighbours. Leading and trailing gaps copy the nearest observed
/// value.
pub fn fill_missing(frame: &TimeSeriesFrame) -> Result<(TimeSeriesFrame, FillReport)> {
    let secs: Vec<f64> = frame
        .timestamps
        .iter()
        .map(|t| (*t - frame.timestamps[0]).num_milliseconds() as f64 / 1000.0)
        .collect();
    let mut filled_cells = 0;
    let mut out = frame.clone();
    for (name, col) in out.names.iter().zip(out.columns.iter_mut()) {
        let observed: Vec<usize> = (0..col.len()).filter(|&i| !is_missing(col[i])).collect();
        if observed.is_empty() {
            return Err(Error::UnfillableColumn(name.clone()));
        }
        if observed.len() == col.len() {
            continue;
        }
        let first = observed[0];
        let last = *observed.last().unwrap();
        for i in 0..first {
            col[i] = col[first];
            filled_cells += 1;
        }
        for i in last + 1..col.len() {
            col[i] = col[last];
            filled_cells += 1;
        }
        for pair in observed.windows(2) {
            let (lo, hi) = (pair[0], pair[1]);
            if hi == lo + 1 {
                continue;
            }
            let (v0, v1) = (col[lo], col[hi]);
            let (t0, t1) = (secs[lo], secs[hi]);
            let (vmin, vmax) = if v0 <= v1 { (v0, v1) } else { (v1, v0) };
            for i in lo + 1..hi {
                let w = (secs[i] - t0) / (t1 - t0);
                col[i] = (v0 + w * (v1 - v0)).clamp(vmin, vmax);
                filled_cells += 1;
            }
        }
    }
    Ok((out, FillReport { filled_cells }))
}

/// Keeps rows 0, 2, 4, ... turning 300 s data into 600 s data.
pub fn downsample_alternate(frame: &TimeSeriesFrame) -> Result<TimeSeriesFrame> {
    if frame.interval_s != 300 {
        return Err(Error::InvalidArgument(format!(
            "alternate-row downsampling expects a 300 s frame, got {} s",
            frame.interval_s
        )));
    }
    if frame.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "downsampling needs at least 2 rows, got {}",
            frame.len()
        )));
    }
    let keep = |v: &Vec<f64>| v.iter().step_by(2).copied().collect::<Vec<_>>();
    Ok(TimeSeriesFrame {
        timestamps: frame.timestamps.iter().step_by(2).copied().collect(),
        names: frame.names.clone(),
        columns: frame.columns.iter().map(keep).collect(),
        interval_s: 600,
        provenance: format!("{}; downsampled 300s->600s", frame.provenance),
    })
}

/// Appends `b` after `a`. A gap between the segments is allowed and noted in
/// the provenance.
pub fn concat(a: &TimeSeriesFrame, b: &TimeSeriesFrame) -> Result<TimeSeriesFrame> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("concat requires two non-empty frames".into()));
    }
    if a.names != b.names {
        return Err(Error::Schema(format!(
            "column sets differ: {:?} vs {:?}",
            a.names, b.names
        )));
    }
    if a.interval_s != b.interval_s {
        return Err(Error::Schema(format!(
            "intervals differ: {} s vs {} s",
            a.interval_s, b.interval_s
        )));
    }
    let a_last = *a.timestamps.last().unwrap();
    let b_first = b.timestamps[0];
    if b_first <= a_last {
        return Err(Error::Ordering(format!(
            "second segment starts at {b_first}, not after {a_last}"
        )));
    }
    let gap = (b_first - a_last).num_seconds();
    let mut provenance = format!("concat({} | {})", a.provenance, b.provenance);
    if gap != a.interval_s {
        provenance.push_str(&format!(
            "; gap of {gap} s between {} and {}",
            format_timestamp(&a_last),
            format_timestamp(&b_first)
        ));
    }
    let mut timestamps = a.timestamps.clone();
    timestamps.extend_from_slice(&b.timestamps);
    let columns = a
        .columns
        .iter()
        .zip(&b.columns)
        .map(|(x, y)| {
            let mut c = x.clone();
            c.extend_from_slice(y);
            c
        })
        .collect();
    Ok(TimeSeriesFrame {
        timestamps,
        names: a.names.clone(),
        columns,
        interval_s: a.interval_s,
        provenance,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.70,
            val: 0.15,
            test: 0.15,
        }
    }
}

impl SplitFractions {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let s = Self { train, val, test };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.val, self.test];
        if all.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "split fractions must all be positive, got {all:?}"
            )));
        }
        if (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "split fractions must sum to 1, got {all:?}"
            )));
        }
        Ok(())
    }

    /// Row boundaries `(train_end, val_end)` for `n` rows: the train and
    /// validation lengths are floored, the test segment takes the remainder.
    pub fn boundaries(&self, n: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let train = (n as f64 * self.train).floor() as usize;
        let val = (n as f64 * self.val).floor() as usize;
        Ok((train, (train + val).min(n)))
    }
}

/// Contiguous train/validation/test segments in time order. Each segment
/// must hold at least `min_len` rows.
pub fn chronological_split(
    frame: &TimeSeriesFrame,
    fractions: SplitFractions,
    min_len: usize,
) -> Result<(TimeSeriesFrame, TimeSeriesFrame, TimeSeriesFrame)> {
    let n = frame.len();
    let (a, b) = fractions.boundaries(n)?;
    for (label, len) in [("train", a), ("validation", b - a), ("test", n - b)] {
        if len < min_len.max(1) {
            return Err(Error::SplitTooSmall(format!(
                "{label} segment has {len} rows, need at least {}",
                min_len.max(1)
            )));
        }
    }
    Ok((frame.slice(0..a), frame.slice(a..b), frame.slice(b..n)))
}

/// One registered dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub id: String,
    pub path: PathBuf,
    pub interval_s: i64,
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
    pub rows: usize,
    #[serde(default)]
    pub provenance: String,
}

impl DatasetEntry {
    pub fn describe(id: &str, path: impl Into<PathBuf>, frame: &TimeSeriesFrame) -> Result<Self> {
        let (start, end) = frame
            .span()
            .ok_or_else(|| Error::EmptyInput(format!("dataset `{id}` has no rows")))?;
        Ok(Self {
            id: id.to_string(),
            path: path.into(),
            interval_s: frame.interval_s,
            start,
            end,
            rows: frame.len(),
            provenance: frame.provenance.clone(),
        })
    }
}

/// Dataset manifest: id -> entry, persisted as JSON.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub datasets: BTreeMap<String, DatasetEntry>,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn insert(&mut self, entry: DatasetEntry) -> Result<()> {
        if self.datasets.contains_key(&entry.id) {
            return Err(Error::InvalidArgument(format!(
                "dataset id `{}` already registered",
                entry.id
            )));
        }
        self.datasets.insert(entry.id.clone(), entry);
        Ok(())
    }
}
