//! Command-line front end.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use anyhow::{bail, Context};
use ccforecast_core::architectures::Architecture;
use ccforecast_core::causal::{sweep_pair, sweep_single, SweepWindow, DEFAULT_WINDOW_DAYS};
use ccforecast_core::forecast::{check_compatible, forecast, steps_per_day, ForecastMode, ForecastRequest};
use ccforecast_core::ingest::{downsample_alternate, fill_missing, load_csv, PlantSchema, TimeSeriesFrame};
use ccforecast_core::synthplant::{generate, GeneratorConfig};
use ccforecast_core::training::{
    apply_hyper, bayes_opt, fit, forward_chain_cv, write_history_jsonl, write_trace_jsonl, HyperoptSpec,
    MetricsReport,
};
use clap::{Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;
use crate::registry::Registry;

#[derive(Debug, Parser)]
#[command(name = "ccforecast", version, about = "Carbon-capture telemetry forecasting and what-if analysis")]
pub struct Cli {
    /// Registry directory holding datasets and models.
    #[arg(long, global = true, env = "CCF_REGISTRY", default_value = "ccf-registry")]
    pub registry: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Plant {
    Cesar1,
    Linear,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic plant dataset and register it.
    Synth {
        #[arg(long, default_value_t = 23.0)]
        days: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        id: Option<String>,
        #[arg(long, value_enum, default_value = "cesar1")]
        plant: Plant,
        /// Keep every other row (300 s -> 600 s).
        #[arg(long)]
        downsample: bool,
    },
    /// Register a plant CSV (gaps are interpolated).
    Ingest {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        id: Option<String>,
        #[arg(long)]
        downsample: bool,
    },
    /// Train a model; prints its id.
    Train {
        /// Defaults to the most recently added dataset.
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        target: String,
        #[arg(long, default_value = "basiclstm")]
        arch: Architecture,
        /// Flat `key = value` file; `CCF_*` variables override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        id: Option<String>,
    },
    /// Bayesian hyperparameter search scored by forward-chaining CV, then
    /// train and register the best configuration.
    Tune {
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        target: String,
        #[arg(long, default_value = "basiclstm")]
        arch: Architecture,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        id: Option<String>,
        /// JSONL search trace; defaults next to the model file.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Score a model's one-step forecasts on a dataset and store the metrics.
    Evaluate {
        #[arg(long)]
        model: String,
        /// Defaults to the model's training dataset.
        #[arg(long)]
        dataset: Option<String>,
        /// First scored row; defaults to the start of the test split.
        #[arg(long)]
        start: Option<usize>,
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Write a forecast CSV (`timestamp,predicted,actual`).
    Forecast {
        #[arg(long)]
        model: String,
        #[arg(long)]
        dataset: Option<String>,
        /// Defaults to the last `horizon` rows.
        #[arg(long)]
        start: Option<usize>,
        #[arg(long)]
        horizon: usize,
        #[arg(long, value_enum, default_value = "exogenous")]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Impact grid over +/-20% deltas: every input (8x9), one input
    /// (`--feature`, 1x9) or two inputs together (`--pair A,B`, 9x9).
    Sweep {
        #[arg(long)]
        model: String,
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long, conflicts_with = "pair")]
        feature: Option<String>,
        #[arg(long, value_name = "A,B")]
        pair: Option<String>,
        #[arg(long)]
        start: Option<usize>,
        /// Window length in rows; defaults to two days.
        #[arg(long)]
        length: Option<usize>,
        /// Grid CSV; the JSON export is written beside it.
        #[arg(long)]
        out: PathBuf,
    },
    /// List registered datasets and models.
    List,
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Mode {
    Exogenous,
    Autoregressive,
}

impl From<Mode> for ForecastMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Exogenous => ForecastMode::Exogenous,
            Mode::Autoregressive => ForecastMode::Autoregressive,
        }
    }
}

fn resolve_dataset(reg: &Registry, given: Option<String>) -> anyhow::Result<String> {
    match given.or_else(|| reg.manifest().latest_dataset.clone()) {
        Some(id) => Ok(id),
        None => bail!("no dataset given and the registry holds none"),
    }
}

fn model_dataset(reg: &Registry, model: &str, given: Option<String>) -> anyhow::Result<String> {
    if let Some(d) = given {
        return Ok(d);
    }
    match &reg.model_entry(model)?.dataset {
        Some(d) => Ok(d.clone()),
        None => bail!("model `{model}` records no dataset; pass --dataset"),
    }
}

fn register_frame(reg: &mut Registry, id: Option<String>, stem: &str, frame: TimeSeriesFrame) -> anyhow::Result<String> {
    let id = id.unwrap_or_else(|| reg.fresh_dataset_id(stem));
    reg.add_dataset(&id, frame)?;
    Ok(id)
}

fn create_file(path: &Path) -> anyhow::Result<std::io::BufWriter<std::fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    let f = std::fs::File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(std::io::BufWriter::new(f))
}

fn print_metrics(out: &mut dyn Write, m: &MetricsReport) -> anyhow::Result<()> {
    writeln!(out, "{m}")?;
    Ok(())
}

struct TrainJob {
    dataset: String,
    target: String,
    arch: Architecture,
    cfg: RunConfig,
    id: Option<String>,
}

/// Fits, scores on the test split and registers a model; returns its id.
fn train_and_register(reg: &mut Registry, job: TrainJob, hyper: Option<&ccforecast_core::training::HyperConfig>) -> anyhow::Result<String> {
    let frame = reg.dataset(&job.dataset)?;
    let mut shape = job.cfg.shape(job.arch);
    let mut train_cfg = job.cfg.train_config();
    if let Some(h) = hyper {
        apply_hyper(h, &mut shape, &mut train_cfg);
    }
    let fc = job.cfg.feature_config(frame.interval_s());
    let mut log = Vec::new();
    let mut progress = std::io::stderr();
    let fitted = fit(&frame, &job.target, shape, &fc, &job.cfg.fractions()?, &train_cfg, Some(&mut progress))?;
    write_history_jsonl(&fitted.history, &mut log)?;
    let metrics = ccforecast_core::training::evaluate(&fitted.model, &fitted.prepared.test)?;
    let mut model = fitted.model;
    model.metadata.dataset_id = Some(job.dataset.clone());
    let stem = format!("{}-{}", job.target, job.arch.to_string().to_ascii_lowercase());
    let id = job.id.unwrap_or_else(|| reg.fresh_model_id(&stem));
    reg.add_model(&id, model, Some(metrics))?;
    let log_path = reg.path_of(Path::new("models")).join(format!("{id}.log.jsonl"));
    std::fs::write(&log_path, log).with_context(|| format!("cannot write {}", log_path.display()))?;
    Ok(id)
}

/// Runs one parsed command, writing results to `out`.
pub fn execute(cli: Cli, out: &mut dyn Write) -> anyhow::Result<()> {
    let mut reg = Registry::open(&cli.registry)?;
    match cli.command {
        Command::Synth {
            days,
            seed,
            id,
            plant,
            downsample,
        } => {
            let gen = match plant {
                Plant::Cesar1 => GeneratorConfig::cesar1(seed, days),
                Plant::Linear => GeneratorConfig::linear_plant(seed, days),
            };
            let mut frame = generate(&gen)?;
            if downsample {
                frame = downsample_alternate(&frame)?;
            }
            let id = register_frame(&mut reg, id, &format!("synth-{seed}"), frame)?;
            gen.save_provenance(reg.path_of(Path::new("datasets")).join(format!("{id}.generator.json")))?;
            writeln!(out, "{id}")?;
        }
        Command::Ingest { csv, id, downsample } => {
            let raw = load_csv(&csv, &PlantSchema::cesar1())?;
            let (mut frame, report) = fill_missing(&raw)?;
            if downsample {
                frame = downsample_alternate(&frame)?;
            }
            let stem = csv
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".into());
            let stem: String = stem
                .chars()
                .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
                .collect();
            let id = register_frame(&mut reg, id, &stem, frame)?;
            eprintln!("filled {} missing cells", report.filled_cells);
            writeln!(out, "{id}")?;
        }
        Command::Train {
            dataset,
            target,
            arch,
            config,
            id,
        } => {
            let cfg = RunConfig::load(config.as_deref(), std::env::vars())?;
            let dataset = resolve_dataset(&reg, dataset)?;
            let id = train_and_register(
                &mut reg,
                TrainJob {
                    dataset,
                    target,
                    arch,
                    cfg,
                    id,
                },
                None,
            )?;
            writeln!(out, "{id}")?;
        }
        Command::Tune {
            dataset,
            target,
            arch,
            config,
            id,
            trace,
        } => {
            let cfg = RunConfig::load(config.as_deref(), std::env::vars())?;
            let dataset = resolve_dataset(&reg, dataset)?;
            let frame = reg.dataset(&dataset)?;
            let fc = cfg.feature_config(frame.interval_s());
            let mut spec = HyperoptSpec::lstm(arch, cfg.budget, cfg.initial_design, cfg.seed);
            spec.candidates = cfg.candidates;
            let result = bayes_opt(
                |h| {
                    let mut shape = cfg.shape(arch);
                    let mut tc = cfg.train_config();
                    apply_hyper(h, &mut shape, &mut tc);
                    match forward_chain_cv(&frame, &target, shape, &fc, &tc, cfg.folds) {
                        Ok(r) => {
                            eprintln!("cv mean mse {:.6e} for {h:?}", r.mean_mse);
                            r.mean_mse
                        }
                        Err(e) => {
                            eprintln!("cv failed for {h:?}: {e}");
                            f64::NAN
                        }
                    }
                },
                &spec,
            )?;
            let id = train_and_register(
                &mut reg,
                TrainJob {
                    dataset,
                    target,
                    arch,
                    cfg,
                    id,
                },
                Some(&result.best),
            )?;
            let trace_path =
                trace.unwrap_or_else(|| reg.path_of(Path::new("models")).join(format!("{id}.trace.jsonl")));
            let mut w = create_file(&trace_path)?;
            write_trace_jsonl(&result.trace, &mut w)?;
            w.flush()?;
            eprintln!("best cv mse {:.6e} with {:?}", result.best_value, result.best);
            writeln!(out, "{id}")?;
        }
        Command::Evaluate {
            model,
            dataset,
            start,
            horizon,
        } => {
            let dataset = model_dataset(&reg, &model, dataset)?;
            let (m, frame) = (reg.model(&model)?, reg.dataset(&dataset)?);
            check_compatible(&m, &frame)?;
            let fc = &m.descriptor.feature_config;
            let earliest = fc.warmup_rows() + fc.window;
            let start = match start {
                Some(s) => s,
                None => RunConfig::default().fractions()?.boundaries(frame.len())?.1.max(earliest),
            };
            let horizon = horizon.unwrap_or_else(|| frame.len().saturating_sub(start));
            let r = forecast(
                &m,
                &frame,
                &ForecastRequest {
                    start,
                    horizon,
                    mode: ForecastMode::Exogenous,
                },
            )?;
            let metrics = r.metrics(&m)?;
            print_metrics(out, &metrics)?;
            reg.set_metrics(&model, metrics)?;
        }
        Command::Forecast {
            model,
            dataset,
            start,
            horizon,
            mode,
            out: path,
        } => {
            let dataset = model_dataset(&reg, &model, dataset)?;
            let (m, frame) = (reg.model(&model)?, reg.dataset(&dataset)?);
            let start = match start {
                Some(s) => s,
                None => frame
                    .len()
                    .checked_sub(horizon)
                    .with_context(|| format!("horizon {horizon} exceeds the {} rows of `{dataset}`", frame.len()))?,
            };
            let r = forecast(
                &m,
                &frame,
                &ForecastRequest {
                    start,
                    horizon,
                    mode: mode.into(),
                },
            )?;
            let mut w = create_file(&path)?;
            r.write_csv_to(&mut w)?;
            w.flush()?;
            writeln!(out, "{}", path.display())?;
        }
        Command::Sweep {
            model,
            dataset,
            feature,
            pair,
            start,
            length,
            out: path,
        } => {
            let dataset = model_dataset(&reg, &model, dataset)?;
            let (m, frame) = (reg.model(&model)?, reg.dataset(&dataset)?);
            check_compatible(&m, &frame)?;
            let length = length.unwrap_or(DEFAULT_WINDOW_DAYS * steps_per_day(frame.interval_s()));
            let start = match start {
                Some(s) => s,
                None => frame
                    .len()
                    .checked_sub(length)
                    .with_context(|| format!("length {length} exceeds the {} rows of `{dataset}`", frame.len()))?,
            };
            let window = SweepWindow { start, length };
            let grid = match (feature, pair) {
                (_, Some(p)) => {
                    let Some((a, b)) = p.split_once(',') else {
                        bail!("--pair expects two comma-separated features, got `{p}`");
                    };
                    sweep_pair(&m, &model, &frame, a.trim(), b.trim(), window)?
                }
                (Some(f), None) => sweep_single(&m, &model, &frame, &[f], window)?,
                (None, None) => sweep_single(&m, &model, &frame, &[], window)?,
            };
            let mut w = create_file(&path)?;
            grid.write_csv_to(&mut w)?;
            w.flush()?;
            let json_path = path.with_extension("json");
            std::fs::write(&json_path, grid.to_json()?)
                .with_context(|| format!("cannot write {}", json_path.display()))?;
            let failed = grid.cells.iter().flatten().filter(|c| c.error.is_some()).count();
            if failed > 0 {
                eprintln!("{failed} of {} cells failed; see the error entries", grid.cell_count());
            }
            writeln!(out, "{}", path.display())?;
            writeln!(out, "{}", json_path.display())?;
        }
        Command::List => {
            for d in reg.datasets() {
                writeln!(out, "dataset {}\t{} rows\t{}s\t{} .. {}", d.id, d.rows, d.interval_s, d.start, d.end)?;
            }
            for m in reg.models() {
                writeln!(
                    out,
                    "model {}\t{}\t{}\t{} params\tdataset {}",
                    m.id,
                    m.architecture,
                    m.target,
                    m.parameters,
                    m.dataset.as_deref().unwrap_or("-")
                )?;
            }
        }
        Command::Serve { addr } => {
            let shared = Arc::new(RwLock::new(reg));
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(crate::api::serve(shared, &addr))?;
        }
    }
    Ok(())
}
