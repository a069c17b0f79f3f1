//! Synthetic CESAR1-like plant telemetry with documented response functions.
//!
//! Inputs follow `x(t) = base * (1 + amplitude * sin(2 pi t / period) + e(t))`
//! where `e` is an AR(1) process. Each output is a product of per-input
//! factors evaluated at (optionally delayed) input values, times a scale
//! constant, plus Gaussian measurement noise. With noise and sinusoids off
//! every output sits at its closed-form fixed point, which makes
//! [`analytic_impact`] an exact oracle for intervention sweeps.

use std::fmt;
use std::path::Path;

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{PlantSchema, TimeSeriesFrame};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputProcess {
    pub name: String,
    pub base: f64,
    pub amplitude: f64,
    pub period_s: f64,
    /// AR(1) innovation scale, relative to `base`.
    pub noise: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FactorKind {
    /// `(x / base)^exponent`
    Power { exponent: f64 },
    /// `exp(-k * (x - reference) / reference)`
    Exp { k: f64, reference: f64 },
    /// `1 + slope * (x - reference) / reference`
    Linear { slope: f64, reference: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Factor {
    pub input: String,
    #[serde(flatten)]
    pub kind: FactorKind,
    /// Transport delay in steps.
    pub delay_steps: usize,
}

impl Factor {
    fn value(&self, x: f64, base: f64) -> f64 {
        match self.kind {
            FactorKind::Power { exponent } => (x / base).powf(exponent),
            FactorKind::Exp { k, reference } => (-k * (x - reference) / reference).exp(),
            FactorKind::Linear { slope, reference } => 1.0 + slope * (x - reference) / reference,
        }
    }
}

/// `output(t) = scale * prod_j factor_j(input_j(t - delay_j)) + noise`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputResponse {
    pub name: String,
    pub scale: f64,
    pub factors: Vec<Factor>,
    /// Measurement noise standard deviation, relative to `scale`.
    pub noise: f64,
}

impl OutputResponse {
    /// Noise-free value given a lookup `(input name, delay) -> value`.
    pub fn evaluate(
        &self,
        bases: &dyn Fn(&str) -> f64,
        input_at: &dyn Fn(&str, usize) -> f64,
    ) -> f64 {
        self.factors.iter().fold(self.scale, |acc, f| {
            acc * f.value(input_at(&f.input, f.delay_steps), bases(&f.input))
        })
    }
}

impl fmt::Display for OutputResponse {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} = {}", self.name, self.scale)?;
        for fac in &self.factors {
            let x = if fac.delay_steps == 0 {
                format!("{}[t]", fac.input)
            } else {
                format!("{}[t-{}]", fac.input, fac.delay_steps)
            };
            match fac.kind {
                FactorKind::Power { exponent } => write!(f, " * ({x}/base)^{exponent}")?,
                FactorKind::Exp { k, reference } => {
                    write!(f, " * exp(-{k}*({x}-{reference})/{reference})")?
                }
                FactorKind::Linear { slope, reference } => {
                    write!(f, " * (1+{slope}*({x}-{reference})/{reference})")?
                }
            }
        }
        write!(f, " + N(0, ({}*{})^2)", self.noise, self.scale)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub interval_s: i64,
    pub days: f64,
    pub start: DateTime<Utc>,
    /// AR(1) coefficient shared by all inputs.
    pub ar_coeff: f64,
    pub inputs: Vec<InputProcess>,
    pub outputs: Vec<OutputResponse>,
}

/// Default transport delay: 30 minutes at 300 s.
pub const DEFAULT_DELAY_STEPS: usize = 6;
/// Delay of the linear plant's response channel.
pub const LINEAR_PLANT_DELAY_STEPS: usize = 1;

fn input(name: &str, base: f64, amplitude: f64, period_h: f64, noise: f64) -> InputProcess {
    InputProcess {
        name: name.into(),
        base,
        amplitude,
        period_s: period_h * 3600.0,
        noise,
    }
}

fn pow(input: &str, exponent: f64, delay: usize) -> Factor {
    Factor {
        input: input.into(),
        kind: FactorKind::Power { exponent },
        delay_steps: delay,
    }
}

fn expo(input: &str, k: f64, reference: f64, delay: usize) -> Factor {
    Factor {
        input: input.into(),
        kind: FactorKind::Exp { k, reference },
        delay_steps: delay,
    }
}

fn lin(input: &str, slope: f64, reference: f64, delay: usize) -> Factor {
    Factor {
        input: input.into(),
        kind: FactorKind::Linear { slope, reference },
        delay_steps: delay,
    }
}

fn output(name: &str, scale: f64, noise: f64, factors: Vec<Factor>) -> OutputResponse {
    OutputResponse {
        name: name.into(),
        scale,
        factors,
        noise,
    }
}

impl GeneratorConfig {
    /// Default plant: emissions fall with lean solvent temperature and rise
    /// with upper water-wash temperature; CO2 product flow falls slightly
    /// with lean solvent temperature.
    pub fn cesar1(seed: u64, days: f64) -> Self {
        let tau = DEFAULT_DELAY_STEPS;
        Self {
            seed,
            interval_s: 300,
            days,
            start: Utc.with_ymd_and_hms(2020, 11, 1, 0, 0, 0).unwrap(),
            ar_coeff: 0.9,
            inputs: vec![
                input("fg_inlet_flow", 9000.0, 0.05, 24.0, 0.004),
                input("fg_inlet_temp", 45.0, 0.04, 17.0, 0.004),
                input("lean_solvent_flow", 40000.0, 0.03, 31.0, 0.003),
                input("lean_solvent_temp", 37.0, 0.06, 13.0, 0.004),
                input("upper_ww_flow", 6000.0, 0.04, 20.0, 0.004),
                input("upper_ww_temp", 30.0, 0.06, 27.0, 0.004),
                input("lower_ww_flow", 7000.0, 0.04, 15.0, 0.004),
                input("lower_ww_temp", 35.0, 0.05, 29.0, 0.004),
            ],
            outputs: vec![
                output(
                    "amp_ftir",
                    2.0,
                    0.01,
                    vec![
                        pow("fg_inlet_flow", 1.0, tau),
                        expo("lean_solvent_temp", 1.5, 37.0, tau),
                        lin("upper_ww_temp", 1.2, 30.0, 0),
                    ],
                ),
                output(
                    "amp_imrms",
                    1.2,
                    0.01,
                    vec![
                        pow("fg_inlet_flow", 0.8, tau),
                        expo("lean_solvent_temp", 1.0, 37.0, tau),
                        lin("upper_ww_temp", 0.8, 30.0, 0),
                    ],
                ),
                output(
                    "pz_ftir",
                    0.4,
                    0.01,
                    vec![
                        pow("fg_inlet_flow", 0.6, tau),
                        expo("lean_solvent_temp", 0.8, 37.0, tau),
                        lin("lower_ww_temp", 1.0, 35.0, tau),
                    ],
                ),
                output(
                    "pz_imrms",
                    0.3,
                    0.01,
                    vec![
                        pow("lean_solvent_flow", 0.5, tau),
                        expo("lean_solvent_temp", 0.6, 37.0, tau),
                        lin("upper_ww_temp", 0.6, 30.0, 0),
                    ],
                ),
                output(
                    "co2_product_flow",
                    1500.0,
                    0.005,
                    vec![
                        lin("lean_solvent_temp", -0.1, 37.0, 0),
                        pow("fg_inlet_flow", 0.9, 0),
                    ],
                ),
                output(
                    "absorber_outlet_temp",
                    50.0,
                    0.005,
                    vec![
                        lin("fg_inlet_temp", 0.3, 45.0, tau),
                        lin("lean_solvent_temp", 0.4, 37.0, tau),
                    ],
                ),
                output(
                    "depleted_fg_temp",
                    32.0,
                    0.005,
                    vec![
                        lin("upper_ww_temp", 0.7, 30.0, tau),
                        lin("fg_inlet_flow", 0.05, 9000.0, tau),
                    ],
                ),
                output(
                    "stripper_bottom_temp",
                    120.0,
                    0.002,
                    vec![
                        lin("lean_solvent_flow", -0.05, 40000.0, tau),
                        lin("fg_inlet_flow", 0.03, 9000.0, tau),
                    ],
                ),
            ],
        }
    }

    /// Variant whose `co2_product_flow` channel is purely linear in the lean
    /// solvent flow one step earlier (`y[t] = beta * x[t-1]`), with a wide
    /// lean-flow swing so that +/-20 % perturbations stay near the training
    /// range.
    pub fn linear_plant(seed: u64, days: f64) -> Self {
        let mut cfg = Self::cesar1(seed, days);
        let lean = cfg
            .inputs
            .iter_mut()
            .find(|i| i.name == "lean_solvent_flow")
            .unwrap();
        lean.amplitude = 0.25;
        let co2 = cfg
            .outputs
            .iter_mut()
            .find(|o| o.name == "co2_product_flow")
            .unwrap();
        co2.factors = vec![pow("lean_solvent_flow", 1.0, LINEAR_PLANT_DELAY_STEPS)];
        co2.scale = 1500.0;
        cfg
    }

    /// Turns off sinusoids and all noise.
    pub fn quiescent(mut self) -> Self {
        for i in &mut self.inputs {
            i.amplitude = 0.0;
            i.noise = 0.0;
        }
        for o in &mut self.outputs {
            o.noise = 0.0;
        }
        self
    }

    /// Turns off measurement noise on the outputs only.
    pub fn noiseless_outputs(mut self) -> Self {
        for o in &mut self.outputs {
            o.noise = 0.0;
        }
        self
    }

    pub fn rows(&self) -> usize {
        (self.days * 86_400.0 / self.interval_s as f64).round() as usize
    }

    pub fn input(&self, name: &str) -> Option<&InputProcess> {
        self.inputs.iter().find(|i| i.name == name)
    }

    pub fn output(&self, name: &str) -> Option<&OutputResponse> {
        self.outputs.iter().find(|o| o.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.days.is_finite() && self.days > 0.0) {
            return Err(Error::Config(format!("days must be positive, got {}", self.days)));
        }
        if self.interval_s <= 0 {
            return Err(Error::Config(format!("interval must be positive, got {}", self.interval_s)));
        }
        if !(0.0..1.0).contains(&self.ar_coeff) {
            return Err(Error::Config(format!("AR(1) coefficient {} outside [0, 1)", self.ar_coeff)));
        }
        let schema = PlantSchema::cesar1();
        let expected_in = schema.input_names();
        let got_in: Vec<String> = self.inputs.iter().map(|i| i.name.clone()).collect();
        if got_in != expected_in {
            return Err(Error::Config(format!("inputs {got_in:?} do not match schema {expected_in:?}")));
        }
        let expected_out = schema.output_names();
        let got_out: Vec<String> = self.outputs.iter().map(|o| o.name.clone()).collect();
        if got_out != expected_out {
            return Err(Error::Config(format!("outputs {got_out:?} do not match schema {expected_out:?}")));
        }
        for i in &self.inputs {
            if !(i.base > 0.0) {
                return Err(Error::Config(format!("base level of `{}` must be positive", i.name)));
            }
            if !(i.noise >= 0.0) || !(i.period_s > 0.0) || !i.amplitude.is_finite() {
                return Err(Error::Config(format!("invalid process parameters for `{}`", i.name)));
            }
        }
        for o in &self.outputs {
            if !(o.noise >= 0.0) {
                return Err(Error::Config(format!("noise of `{}` must be >= 0", o.name)));
            }
            for f in &o.factors {
                if self.input(&f.input).is_none() {
                    return Err(Error::Config(format!(
                        "output `{}` references unknown input `{}`",
                        o.name, f.input
                    )));
                }
            }
        }
        Ok(())
    }

    /// One line per output describing its closed form.
    pub fn describe_forms(&self) -> String {
        self.outputs
            .iter()
            .map(|o| o.to_string())
            .collect::<Vec<_>>()
            .join("; ")
    }

    /// Writes the configuration as a JSON sidecar.
    pub fn save_provenance(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_provenance(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Generates the full 16-column frame for `config`.
pub fn generate(config: &GeneratorConfig) -> Result<TimeSeriesFrame> {
    config.validate()?;
    let n = config.rows();
    if n == 0 {
        return Err(Error::Config("configuration yields zero rows".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let rho = config.ar_coeff;
    let dt = config.interval_s as f64;

    let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(config.inputs.len());
    for p in &config.inputs {
        let stationary_sd = p.noise / (1.0 - rho * rho).sqrt();
        let mut e = stationary_sd * std_normal.sample(&mut rng);
        let mut col = Vec::with_capacity(n);
        for i in 0..n {
            if i > 0 {
                e = rho * e + p.noise * std_normal.sample(&mut rng);
            }
            let t = i as f64 * dt;
            let phase = 2.0 * std::f64::consts::PI * t / p.period_s;
            col.push(p.base * (1.0 + p.amplitude * phase.sin() + e));
        }
        inputs.push(col);
    }

    let index = |name: &str| config.inputs.iter().position(|p| p.name == name).unwrap();
    let bases = |name: &str| config.inputs[index(name)].base;
    let mut columns: Vec<(String, Vec<f64>)> = config
        .inputs
        .iter()
        .zip(inputs.iter())
        .map(|(p, c)| (p.name.clone(), c.clone()))
        .collect();
    for o in &config.outputs {
        let mut col = Vec::with_capacity(n);
        for t in 0..n {
            let at = |name: &str, delay: usize| inputs[index(name)][t.saturating_sub(delay)];
            let clean = o.evaluate(&bases, &at);
            let noise = if o.noise > 0.0 {
                o.noise * o.scale * std_normal.sample(&mut rng)
            } else {
                0.0
            };
            col.push(clean + noise);
        }
        columns.push((o.name.clone(), col));
    }

    let timestamps = (0..n)
        .map(|i| config.start + Duration::seconds(i as i64 * config.interval_s))
        .collect();
    TimeSeriesFrame::new(
        timestamps,
        columns,
        config.interval_s,
        format!("synthplant seed={}; {}", config.seed, config.describe_forms()),
    )
}

/// Steady-state value of `output` with every input at its base level,
/// except `feature`, which is scaled by `1 + delta`.
fn steady_state(config: &GeneratorConfig, output: &OutputResponse, feature: &str, delta: f64) -> f64 {
    let bases = |name: &str| config.input(name).map(|p| p.base).unwrap_or(f64::NAN);
    let at = |name: &str, _delay: usize| {
        let b = bases(name);
        if name == feature {
            b * (1.0 + delta)
        } else {
            b
        }
    };
    output.evaluate(&bases, &at)
}

/// Exact percent change of `output`'s closed form when `feature` is scaled
/// by `1 + delta`, with noise and sinusoids suppressed.
pub fn analytic_impact(config: &GeneratorConfig, feature: &str, delta: f64, output: &str) -> Result<f64> {
    if config.input(feature).is_none() {
        return Err(Error::UnknownName(format!("input `{feature}`")));
    }
    let response = config
        .output(output)
        .ok_or_else(|| Error::UnknownName(format!("output `{output}`")))?;
    if !(delta.abs() <= 0.20) {
        return Err(Error::InvalidArgument(format!("|delta| must be <= 0.20, got {delta}")));
    }
    if delta == 0.0 {
        return Ok(0.0);
    }
    let base = steady_state(config, response, feature, 0.0);
    let pert = steady_state(config, response, feature, delta);
    Ok(100.0 * (pert - base) / base)
}
