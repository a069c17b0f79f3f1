//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p ccforecast-service --test acceptance`. Exits
//! non-zero if any criterion fails. Criteria run concurrently; every
//! reported duration is wall-clock under that contention.

use std::sync::{Arc, RwLock};
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use ccforecast_core::architectures::{param_count, Architecture, Network, NetworkSpec, TrainedModel};
use ccforecast_core::causal::{
    impact, sweep_pair, sweep_single, Intervention, InterventionSpec, SweepWindow, SWEEP_DELTAS, ZERO_DELTA_INDEX,
};
use ccforecast_core::features::{lag_name, make_lags, make_rolling, rolling_name, ColumnScale, FeatureConfig, RollingStat};
use ccforecast_core::forecast::{forecast, horizon_degradation, ForecastMode, ForecastRequest};
use ccforecast_core::ingest::{downsample_alternate, fill_missing, is_missing, SplitFractions, TimeSeriesFrame, MISSING};
use ccforecast_core::neuralcore::Tensor;
use ccforecast_core::synthplant::{analytic_impact, generate, GeneratorConfig};
use ccforecast_core::training::{bayes_opt, fit, metrics, predict_dataset, HyperoptSpec, ModelShape, ParamDomain, TrainConfig};
use ccforecast_service::api::router;
use ccforecast_service::Registry;
use chrono::{TimeZone, Utc};
use http_body_util::BodyExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(name: &'static str, pass: bool, detail: String) -> Outcome {
    Outcome { name, pass, detail }
}

fn secs(d: Duration) -> String {
    format!("{:.1} s", d.as_secs_f64())
}

// ---------------------------------------------------------------- gradients

fn gradient_fidelity() -> Outcome {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for arch in Architecture::ALL {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed * 7 + arch as u64);
            let (d, h, t) = (rng.random_range(1..=5), rng.random_range(1..=6), rng.random_range(1..=7));
            let mut spec = NetworkSpec::new(arch, d, h);
            match arch {
                Architecture::Stacked => spec = spec.with_layers(rng.random_range(2..=3)),
                Architecture::Conv => spec = spec.with_kernel([1, 3, 5][rng.random_range(0..3)]),
                _ => {}
            }
            let samples: Vec<Vec<f64>> = (0..2).map(|_| (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let targets = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let refs: Vec<&[f64]> = samples.iter().map(Vec::as_slice).collect();
            let mut net = Network::build(spec, seed).unwrap();
            for p in &mut net.params {
                for v in p.data_mut() {
                    *v += rng.random_range(-0.3..0.3);
                }
            }
            let (_, grads) = net.loss_and_grads(&refs, &targets).unwrap();
            let loss = |params: Vec<Tensor>| Network::from_params(spec, params).unwrap().loss_and_grads(&refs, &targets).unwrap().0;
            for (pi, p) in net.params.iter().enumerate() {
                for k in 0..p.len() {
                    let mut plus = net.params.clone();
                    plus[pi].data_mut()[k] += 1e-5;
                    let mut minus = net.params.clone();
                    minus[pi].data_mut()[k] -= 1e-5;
                    let numeric = (loss(plus) - loss(minus)) / 2e-5;
                    let analytic = grads[pi].data()[k];
                    worst = worst.max((analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8));
                    checked += 1;
                }
            }
        }
    }
    let elapsed = started.elapsed();
    outcome(
        "gradient fidelity",
        worst < 1e-4 && elapsed < Duration::from_secs(60),
        format!("max relative error {worst:.2e} over {checked} parameters (< 1e-4), {}", secs(elapsed)),
    )
}

// ----------------------------------------------------------- param counts

fn parameter_counts() -> Outcome {
    let anchor = param_count(&NetworkSpec::new(Architecture::Bi, 196, 64));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    for i in 0..100 {
        let arch = Architecture::ALL[i % 4];
        let mut spec = NetworkSpec::new(arch, rng.random_range(1..=80), rng.random_range(1..=40));
        match arch {
            Architecture::Stacked => spec = spec.with_layers(rng.random_range(2..=4)),
            Architecture::Conv => spec = spec.with_kernel(2 * rng.random_range(0..=3) + 1),
            _ => {}
        }
        let elements: usize = Network::build(spec, i as u64).unwrap().params.iter().map(|t| t.len()).sum();
        if elements != param_count(&spec) {
            mismatches += 1;
        }
    }
    outcome(
        "parameter-count anchor",
        anchor == 133_761 && mismatches == 0,
        format!("Bi(d=196, h=64) = {anchor} (expected 133761); {mismatches}/100 random descriptors mismatch"),
    )
}

// ---------------------------------------------------------------- metrics

fn metric_oracle() -> Outcome {
    let unit = ColumnScale {
        name: "y".into(),
        min: 0.0,
        max: 1.0,
    };
    let m = metrics(&[1.0, 4.0, 8.0], &[2.0, 4.0, 6.0], &unit).unwrap();
    let worked = (m.mse - 5.0 / 3.0).abs() < 1e-5
        && (m.rmse - 1.29099).abs() < 1e-5
        && (m.mae - 1.0).abs() < 1e-5
        && (m.mape.unwrap() - 27.7778).abs() < 1e-4
        && (m.r2.unwrap() - 0.375).abs() < 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut violations = 0;
    for _ in 0..1000 {
        let n = rng.random_range(2..50);
        let actual: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..100.0)).collect();
        let pred: Vec<f64> = actual.iter().map(|a| a + rng.random_range(-20.0..20.0)).collect();
        let r = metrics(&pred, &actual, &ColumnScale { name: "y".into(), min: 0.0, max: 100.0 }).unwrap();
        if (r.rmse * r.rmse - r.mse).abs() > 1e-12 * r.mse.max(1.0) || r.mae > r.rmse * (1.0 + 1e-12) {
            violations += 1;
        }
    }
    outcome(
        "metric oracle",
        worked && violations == 0,
        format!(
            "worked example MSE {:.6} RMSE {:.6} MAE {:.6} MAPE {:.4}% R2 {:.6}; {violations}/1000 invariant violations",
            m.mse,
            m.rmse,
            m.mae,
            m.mape.unwrap(),
            m.r2.unwrap()
        ),
    )
}

// ---------------------------------------------------------- preprocessing

fn random_frame(rng: &mut ChaCha8Rng, with_gaps: bool) -> TimeSeriesFrame {
    let n = rng.random_range(4..90);
    let t0 = Utc.with_ymd_and_hms(2021, 1, 1, 0, 0, 0).unwrap();
    let mut t = 0;
    let ts = (0..n)
        .map(|_| {
            t += if with_gaps { 300 * rng.random_range(1..4) } else { 300 };
            t0 + chrono::Duration::seconds(t)
        })
        .collect();
    let cols = (0..rng.random_range(1..4))
        .map(|j| {
            let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-500.0..500.0)).collect();
            if with_gaps {
                for x in v.iter_mut() {
                    if rng.random_bool(0.3) {
                        *x = MISSING;
                    }
                }
                v[rng.random_range(0..n)] = 1.5;
            }
            (format!("c{j}"), v)
        })
        .collect();
    TimeSeriesFrame::new(ts, cols, 300, "acceptance").unwrap()
}

fn preprocessing_oracles() -> Outcome {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b.abs().max(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut bad = [0usize; 4];
    for _ in 0..100 {
        let gappy = random_frame(&mut rng, true);
        let (filled, _) = fill_missing(&gappy).unwrap();
        let ts: Vec<f64> = gappy.timestamps().iter().map(|t| t.timestamp() as f64).collect();
        for (name, raw) in gappy.columns() {
            let got = filled.column(name).unwrap();
            for i in 0..raw.len() {
                let want = if is_missing(raw[i]) {
                    let p = (0..i).rev().find(|&k| !is_missing(raw[k]));
                    let q = (i + 1..raw.len()).find(|&k| !is_missing(raw[k]));
                    match (p, q) {
                        (Some(p), Some(q)) => raw[p] + (ts[i] - ts[p]) / (ts[q] - ts[p]) * (raw[q] - raw[p]),
                        (Some(p), None) => raw[p],
                        (None, Some(q)) => raw[q],
                        (None, None) => f64::NAN,
                    }
                } else {
                    raw[i]
                };
                if !close(got[i], want) {
                    bad[0] += 1;
                }
            }
        }

        let frame = random_frame(&mut rng, false);
        let names = frame.column_names().to_vec();
        let down = downsample_alternate(&frame).unwrap();
        let expected_rows: Vec<usize> = (0..frame.len()).filter(|i| i % 2 == 0).collect();
        if down.len() != expected_rows.len()
            || expected_rows.iter().enumerate().any(|(k, &i)| {
                down.timestamps()[k] != frame.timestamps()[i]
                    || names.iter().any(|c| down.column(c).unwrap()[k] != frame.column(c).unwrap()[i])
            })
        {
            bad[1] += 1;
        }

        let lag = rng.random_range(1..frame.len().min(13));
        let lagged = make_lags(&frame, &names, lag).unwrap();
        for c in &names {
            let raw = frame.column(c).unwrap();
            let l = lagged.column(&lag_name(c, lag)).unwrap();
            for t in 0..raw.len() {
                let ok = if t < lag { is_missing(l[t]) } else { l[t] == raw[t - lag] };
                if !ok {
                    bad[2] += 1;
                }
            }
        }

        let w = rng.random_range(2..=frame.len().min(36));
        let rolled = make_rolling(&frame, &names, &[w], &[RollingStat::Mean, RollingStat::Std]).unwrap();
        for c in &names {
            let raw = frame.column(c).unwrap();
            let mean = rolled.column(&rolling_name(c, w, RollingStat::Mean)).unwrap();
            let std = rolled.column(&rolling_name(c, w, RollingStat::Std)).unwrap();
            for t in w - 1..raw.len() {
                let win = &raw[t + 1 - w..=t];
                let m = win.iter().sum::<f64>() / w as f64;
                let s = (win.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (w - 1) as f64).sqrt();
                if !close(mean[t], m) || !close(std[t], s) {
                    bad[3] += 1;
                }
            }
        }
    }
    outcome(
        "preprocessing oracles",
        bad.iter().all(|b| *b == 0),
        format!(
            "100 random frames; mismatches > 1e-12: interpolation {}, downsampling {}, lag {}, rolling {}",
            bad[0], bad[1], bad[2], bad[3]
        ),
    )
}

// ------------------------------------------------------------ end to end

const THREE_DAYS: usize = 864;

struct EndToEnd {
    generator: GeneratorConfig,
    frame: TimeSeriesFrame,
    model: TrainedModel,
}

fn end_to_end() -> (Outcome, EndToEnd) {
    let started = Instant::now();
    let generator = GeneratorConfig::cesar1(7, 23.0);
    let frame = generate(&generator).unwrap();
    let cfg = TrainConfig {
        batch_size: 32,
        max_epochs: 30,
        patience: 6,
        learning_rate: 0.003,
        seed: 1,
        ..TrainConfig::default()
    };
    let fc = FeatureConfig::hourly(frame.interval_s(), 12);
    let fitted = fit(
        &frame,
        "amp_ftir",
        ModelShape::new(Architecture::Basic, 32),
        &fc,
        &SplitFractions::default(),
        &cfg,
        None,
    )
    .unwrap();
    let test_start = fitted.prepared.boundaries.1;
    let start = frame.len() - THREE_DAYS;
    let r = forecast(
        &fitted.model,
        &frame,
        &ForecastRequest {
            start,
            horizon: THREE_DAYS,
            mode: ForecastMode::Exogenous,
        },
    )
    .unwrap();
    let r2 = r.metrics(&fitted.model).unwrap().r2.unwrap();
    let elapsed = started.elapsed();
    (
        outcome(
            "end-to-end synthetic forecasting",
            r2 >= 0.95 && elapsed < Duration::from_secs(600) && start >= test_start,
            format!(
                "BasicLSTM on {} rows, R2 {r2:.4} over the final 3 days (>= 0.95), {} epochs, {}",
                frame.len(),
                fitted.model.metadata.epochs_run,
                secs(elapsed)
            ),
        ),
        EndToEnd {
            generator,
            frame,
            model: fitted.model,
        },
    )
}

// ------------------------------------------------------ horizon degradation

fn horizon() -> Outcome {
    let started = Instant::now();
    let mut wins = 0;
    for seed in 0..20u64 {
        let frame = generate(&GeneratorConfig::cesar1(100 + seed, 12.0)).unwrap();
        let fc = FeatureConfig::hourly(frame.interval_s(), 6).with_target_lags(true);
        let cfg = TrainConfig {
            batch_size: 32,
            max_epochs: 8,
            patience: 4,
            learning_rate: 0.003,
            seed,
            ..TrainConfig::default()
        };
        let fitted = fit(&frame, "amp_ftir", ModelShape::new(Architecture::Basic, 16), &fc, &SplitFractions::default(), &cfg, None)
            .unwrap();
        let reports = horizon_degradation(
            &fitted.model,
            &frame,
            frame.len() - THREE_DAYS,
            &[288, THREE_DAYS],
            ForecastMode::Autoregressive,
        )
        .unwrap();
        if reports[0].1.r2.unwrap() >= reports[1].1.r2.unwrap() {
            wins += 1;
        }
    }
    outcome(
        "horizon degradation",
        wins >= 16,
        format!("R2(1 day) >= R2(3 days) in {wins}/20 autoregressive runs (>= 16), {}", secs(started.elapsed())),
    )
}

// ------------------------------------------------------------------ causal

fn causal_identity(e: &EndToEnd) -> Outcome {
    let n = e.frame.len();
    let window = SweepWindow { start: n - 288, length: 288 };
    let zero = impact(
        &e.model,
        &e.frame,
        &InterventionSpec {
            interventions: vec![Intervention::new("lean_solvent_temp", 0.0)],
            start: window.start,
            length: window.length,
        },
    )
    .unwrap()
    .impact_pct;
    let single = sweep_single(&e.model, "e2e", &e.frame, &[], window).unwrap();
    let (a, b) = ("lean_solvent_temp", "upper_ww_temp");
    let pair = sweep_pair(&e.model, "e2e", &e.frame, a, b, window).unwrap();
    let row_a = single.features.iter().position(|f| f == a).unwrap();
    let mut worst: f64 = 0.0;
    for (i, _) in SWEEP_DELTAS.iter().enumerate() {
        let s = single.value(row_a, i).unwrap();
        let p = pair.value(i, ZERO_DELTA_INDEX).unwrap();
        worst = worst.max((s - p).abs());
    }
    let zero_cells = (0..single.shape().0).all(|r| single.value(r, ZERO_DELTA_INDEX) == Some(0.0))
        && pair.value(ZERO_DELTA_INDEX, ZERO_DELTA_INDEX) == Some(0.0);
    outcome(
        "causal identity and consistency",
        zero == 0.0 && zero_cells && worst <= 1e-12 && single.shape() == (8, 9) && pair.shape() == (9, 9),
        format!(
            "zero-delta impact {zero}; pair(d, 0) vs single(d) max diff {worst:.1e}; grids {:?} and {:?}",
            single.shape(),
            pair.shape()
        ),
    )
}

fn linear_plant() -> (bool, String) {
    let generator = GeneratorConfig::linear_plant(11, 23.0);
    let frame = generate(&generator).unwrap();
    let cfg = TrainConfig {
        batch_size: 32,
        max_epochs: 100,
        patience: 6,
        learning_rate: 0.003,
        seed: 1,
        ..TrainConfig::default()
    };
    let fc = FeatureConfig::hourly(frame.interval_s(), 12);
    let fitted = fit(
        &frame,
        "co2_product_flow",
        ModelShape::new(Architecture::Basic, 32),
        &fc,
        &SplitFractions::default(),
        &cfg,
        None,
    )
    .unwrap();
    let n = frame.len();
    let mut worst: f64 = 0.0;
    for d in SWEEP_DELTAS {
        let got = impact(
            &fitted.model,
            &frame,
            &InterventionSpec {
                interventions: vec![Intervention::new("lean_solvent_flow", d)],
                start: n - 576,
                length: 576,
            },
        )
        .unwrap()
        .impact_pct;
        let want = analytic_impact(&generator, "lean_solvent_flow", d, "co2_product_flow").unwrap();
        worst = worst.max((got - want).abs());
    }
    (worst <= 1.5, format!("linear plant max |estimate - analytic| {worst:.3} pp (<= 1.5)"))
}

fn emission_signs(e: &EndToEnd) -> (bool, String) {
    let n = e.frame.len();
    let grid = sweep_single(
        &e.model,
        "e2e",
        &e.frame,
        &["lean_solvent_temp".to_string()],
        SweepWindow { start: n - 576, length: 576 },
    )
    .unwrap();
    let mut agree = 0;
    for (i, d) in SWEEP_DELTAS.iter().enumerate() {
        if *d == 0.0 {
            continue;
        }
        let want = analytic_impact(&e.generator, "lean_solvent_temp", *d, "amp_ftir").unwrap();
        if grid.value(0, i).unwrap().signum() == want.signum() {
            agree += 1;
        }
    }
    (agree == 8, format!("amp_ftir vs lean_solvent_temp signs agree {agree}/8"))
}

// ---------------------------------------------------------------- hyperopt

fn bayesian_optimization() -> Outcome {
    let mut hits = 0;
    let mut monotone = true;
    for seed in 0..20 {
        let spec = HyperoptSpec {
            space: vec![("x".into(), ParamDomain::Uniform { lo: 0.0, hi: 1.0 })],
            initial_design: 5,
            budget: 20,
            candidates: 1024,
            seed,
        };
        let r = bayes_opt(|c| (c["x"] - 0.3).powi(2), &spec).unwrap();
        monotone &= r.trace.windows(2).all(|w| w[1].incumbent_value <= w[0].incumbent_value);
        if (r.best["x"] - 0.3).abs() <= 0.05 {
            hits += 1;
        }
    }
    outcome(
        "Bayesian optimization sanity",
        hits >= 19 && monotone,
        format!("incumbent within 0.05 of 0.3 in {hits}/20 runs (>= 19); traces non-increasing: {monotone}"),
    )
}

// ------------------------------------------------------------ determinism

fn determinism() -> Outcome {
    let frame = generate(&GeneratorConfig::cesar1(5, 2.0)).unwrap();
    let fc = FeatureConfig::hourly(frame.interval_s(), 6);
    let cfg = TrainConfig {
        max_epochs: 3,
        seed: 9,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let mut identical = 0;
    let mut round_trips = 0;
    for arch in Architecture::ALL {
        let run = || fit(&frame, "pz_ftir", ModelShape::new(arch, 6), &fc, &SplitFractions::default(), &cfg, None).unwrap();
        let (a, b) = (run(), run());
        let bits = |m: &TrainedModel| -> Vec<u64> {
            m.network.params.iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
        };
        if bits(&a.model) == bits(&b.model) {
            identical += 1;
        }
        let path = dir.path().join(format!("{arch}.ccfm"));
        a.model.save(&path).unwrap();
        let loaded = TrainedModel::load(&path).unwrap();
        let before = predict_dataset(&a.model.network, &a.prepared.all).unwrap();
        let after = predict_dataset(&loaded.network, &a.prepared.all).unwrap();
        if before.iter().zip(&after).all(|(x, y)| x.to_bits() == y.to_bits()) && before.len() == after.len() {
            round_trips += 1;
        }
    }
    outcome(
        "determinism and persistence",
        identical == 4 && round_trips == 4,
        format!("bit-identical retraining {identical}/4 architectures; bit-exact save/load forward {round_trips}/4"),
    )
}

// -------------------------------------------------------------------- API

async fn post(app: &axum::Router, uri: &str, body: Value) -> (StatusCode, Value) {
    let req = Request::builder()
        .method("POST")
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap())
}

fn api_equivalence() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let frame = generate(&GeneratorConfig::cesar1(8, 3.0)).unwrap();
    let fc = FeatureConfig::hourly(frame.interval_s(), 6);
    let cfg = TrainConfig {
        max_epochs: 3,
        ..TrainConfig::default()
    };
    let fitted = fit(&frame, "amp_ftir", ModelShape::new(Architecture::Bi, 8), &fc, &SplitFractions::default(), &cfg, None).unwrap();
    let mut reg = Registry::open(dir.path()).unwrap();
    reg.add_dataset("demo", frame.clone()).unwrap();
    reg.add_model("bi", fitted.model.clone(), None).unwrap();
    let app = router(Arc::new(RwLock::new(reg)));
    let model = &fitted.model;
    let (start, length) = (frame.len() - 288, 288);

    let rt = tokio::runtime::Runtime::new().unwrap();
    rt.block_on(async {
        let expected = impact(
            model,
            &frame,
            &InterventionSpec {
                interventions: vec![Intervention::new("lean_solvent_temp", -0.2)],
                start,
                length,
            },
        )
        .unwrap();
        let (s, v) = post(
            &app,
            "/api/v1/whatif",
            json!({"model": "bi", "dataset": "demo", "start": start, "length": length,
                   "interventions": [{"feature": "lean_solvent_temp", "delta_pct": -0.2}]}),
        )
        .await;
        let series = |k: &str| -> Vec<u64> { v[k].as_array().unwrap().iter().map(|x| x.as_f64().unwrap().to_bits()).collect() };
        let bits = |x: &[f64]| -> Vec<u64> { x.iter().map(|v| v.to_bits()).collect() };
        let whatif_ok = s == StatusCode::OK
            && series("baseline") == bits(&expected.baseline)
            && series("counterfactual") == bits(&expected.counterfactual)
            && v["impact_pct"].as_f64().map(f64::to_bits) == Some(expected.impact_pct.to_bits());

        let grid = sweep_single(model, "bi", &frame, &[], SweepWindow { start, length }).unwrap();
        let (s, v) = post(&app, "/api/v1/sweep", json!({"model": "bi", "dataset": "demo", "start": start, "length": length})).await;
        let sweep_ok = s == StatusCode::OK && v == serde_json::to_value(&grid).unwrap() && {
            let got: ccforecast_core::causal::ImpactGrid = serde_json::from_value(v).unwrap();
            got.cells
                .iter()
                .flatten()
                .zip(grid.cells.iter().flatten())
                .all(|(a, b)| a.impact_pct.map(f64::to_bits) == b.impact_pct.map(f64::to_bits))
        };

        let (s, v) = post(
            &app,
            "/api/v1/whatif",
            json!({"model": "bi", "dataset": "demo",
                   "interventions": [{"feature": "lean_solvent_temp", "delta_pct": 0.25}]}),
        )
        .await;
        let reject_ok = s == StatusCode::UNPROCESSABLE_ENTITY && v["error"]["field"] == "interventions[0].delta_pct";

        outcome(
            "API equivalence",
            whatif_ok && sweep_ok && reject_ok,
            format!(
                "whatif bit-equal: {whatif_ok}; sweep ({} cells) bit-equal: {sweep_ok}; delta 0.25 -> {} naming `{}`",
                grid.cell_count(),
                s.as_u16(),
                v["error"]["field"].as_str().unwrap_or("-")
            ),
        )
    })
}

fn main() {
    let started = Instant::now();
    let (mut primary, causal_oracle) = std::thread::scope(|s| {
        let e2e = s.spawn(|| {
            let (o, e) = end_to_end();
            let identity = causal_identity(&e);
            let signs = emission_signs(&e);
            (o, identity, signs)
        });
        let linear = s.spawn(linear_plant);
        let horizon = s.spawn(horizon);
        let api = s.spawn(api_equivalence);
        let mut fast = vec![gradient_fidelity(), parameter_counts(), metric_oracle(), preprocessing_oracles()];
        let bayes = bayesian_optimization();
        let det = determinism();
        let (e2e, identity, signs) = e2e.join().unwrap();
        let (lin_ok, lin_detail) = linear.join().unwrap();
        fast.push(e2e);
        fast.push(horizon.join().unwrap());
        fast.push(identity);
        let causal = outcome(
            "causal oracle",
            lin_ok && signs.0,
            format!("{lin_detail}; {}", signs.1),
        );
        (fast, (causal, bayes, det, api.join().unwrap()))
    });
    let (causal, bayes, det, api) = causal_oracle;
    primary.extend([causal, bayes, det, api]);

    let mut failed = 0;
    for o in &primary {
        println!("{} {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.name, o.detail);
        if !o.pass {
            failed += 1;
        }
    }
    println!(
        "{} of {} criteria passed in {}",
        primary.len() - failed,
        primary.len(),
        secs(started.elapsed())
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
