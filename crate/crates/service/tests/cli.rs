use std::path::Path;
use std::process::{Command, Output};

use ccforecast_core::causal::ImpactGrid;
use ccforecast_service::Registry;

const SMALL: &str = "hidden = 4\nwindow = 6\nmax_epochs = 2\nbatch_size = 64\nfeatures = \"raw\"\n";

fn run(registry: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ccforecast"))
        .arg("--registry")
        .arg(registry)
        .args(args)
        .env_remove("CCF_REGISTRY")
        .output()
        .expect("binary runs")
}

fn ok(registry: &Path, args: &[&str]) -> String {
    let o = run(registry, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn setup() -> (tempfile::TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    let reg = dir.path().join("reg");
    let cfg = dir.path().join("small.conf");
    std::fs::write(&cfg, SMALL).unwrap();
    ok(&reg, &["synth", "--days", "2", "--seed", "7"]);
    let cfg = cfg.to_str().unwrap().to_string();
    (dir, cfg)
}

#[test]
fn synth_then_train_grows_the_registry_by_one() {
    let (dir, cfg) = setup();
    let reg = dir.path().join("reg");
    assert_eq!(Registry::open(&reg).unwrap().models().len(), 0);
    let out = ok(&reg, &["train", "--target", "amp_ftir", "--arch", "bilstm", "--config", &cfg]);
    let id = out.trim();
    assert_eq!(id, "amp_ftir-bilstm");
    let r = Registry::open(&reg).unwrap();
    assert_eq!(r.models().len(), 1);
    assert_eq!(r.model_entry(id).unwrap().dataset.as_deref(), Some("synth-7"));
    assert!(reg.join("models").join(format!("{id}.log.jsonl")).is_file());

    let out = ok(&reg, &["train", "--target", "amp_ftir", "--arch", "bilstm", "--config", &cfg]);
    assert_eq!(out.trim(), "amp_ftir-bilstm-2");
    assert_eq!(Registry::open(&reg).unwrap().models().len(), 2);
}

#[test]
fn evaluate_prints_all_five_metrics_and_stores_them() {
    let (dir, cfg) = setup();
    let reg = dir.path().join("reg");
    let id = ok(&reg, &["train", "--target", "amp_ftir", "--config", &cfg]).trim().to_string();
    let out = ok(&reg, &["evaluate", "--model", &id]);
    for name in ["MSE", "RMSE", "MAE", "MAPE", "R2"] {
        assert!(out.lines().any(|l| l.starts_with(name)), "{name} missing from\n{out}");
    }
    let stored = Registry::open(&reg).unwrap().model_entry(&id).unwrap().metrics.unwrap();
    assert!(out.contains(&format!("{:.8}", stored.rmse)));
}

#[test]
fn forecast_and_sweep_exports() {
    let (dir, cfg) = setup();
    let reg = dir.path().join("reg");
    let id = ok(&reg, &["train", "--target", "co2_product_flow", "--config", &cfg]).trim().to_string();

    let csv = dir.path().join("f.csv");
    ok(&reg, &["forecast", "--model", &id, "--horizon", "30", "--out", csv.to_str().unwrap()]);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next(), Some("timestamp,predicted,actual"));
    assert_eq!(text.lines().count(), 31);

    let cells = |path: &Path| {
        let g = ImpactGrid::read_csv(std::fs::File::open(path).unwrap()).unwrap();
        let j = ImpactGrid::from_json(&std::fs::read_to_string(path.with_extension("json")).unwrap()).unwrap();
        assert_eq!(g, j);
        g.cell_count()
    };
    let one = dir.path().join("one.csv");
    ok(&reg, &["sweep", "--model", &id, "--length", "24", "--feature", "lean_solvent_temp", "--out", one.to_str().unwrap()]);
    assert_eq!(cells(&one), 9);
    let all = dir.path().join("all.csv");
    ok(&reg, &["sweep", "--model", &id, "--length", "24", "--out", all.to_str().unwrap()]);
    assert_eq!(cells(&all), 72);
    let pair = dir.path().join("pair.csv");
    ok(
        &reg,
        &["sweep", "--model", &id, "--length", "24", "--pair", "lean_solvent_temp,lean_solvent_flow", "--out", pair.to_str().unwrap()],
    );
    assert_eq!(cells(&pair), 81);
}

#[test]
fn unknown_ids_exit_nonzero_with_a_message() {
    let (dir, _) = setup();
    let reg = dir.path().join("reg");
    for args in [
        vec!["evaluate", "--model", "ghost"],
        vec!["train", "--dataset", "ghost", "--target", "amp_ftir"],
        vec!["forecast", "--model", "ghost", "--horizon", "3", "--out", "x.csv"],
    ] {
        let o = run(&reg, &args);
        assert!(!o.status.success(), "{args:?}");
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.contains("ghost"), "{err}");
        assert!(o.stdout.is_empty());
    }
    assert!(!run(&reg, &["frobnicate"]).status.success());
}

#[test]
fn ingest_round_trips_a_csv() {
    let (dir, _) = setup();
    let reg = dir.path().join("reg");
    let src = Registry::open(&reg).unwrap().dataset("synth-7").unwrap();
    let csv = dir.path().join("plant export.csv");
    ccforecast_core::ingest::write_csv(&src, &csv).unwrap();
    let id = ok(&reg, &["ingest", "--csv", csv.to_str().unwrap(), "--downsample"]).trim().to_string();
    assert_eq!(id, "plant_export");
    let back = Registry::open(&reg).unwrap().dataset(&id).unwrap();
    assert_eq!(back.len(), src.len() / 2);
    assert_eq!(back.interval_s(), 600);
}

#[test]
fn tune_registers_the_best_model_and_writes_a_trace() {
    let (dir, _) = setup();
    let reg = dir.path().join("reg");
    let cfg = dir.path().join("tune.conf");
    std::fs::write(
        &cfg,
        "window = 6\nmax_epochs = 1\nfeatures = \"raw\"\nbudget = 3\ninitial_design = 2\ncandidates = 64\nfolds = 2\n",
    )
    .unwrap();
    let trace = dir.path().join("trace.jsonl");
    let id = ok(
        &reg,
        &["tune", "--target", "amp_ftir", "--config", cfg.to_str().unwrap(), "--trace", trace.to_str().unwrap()],
    )
    .trim()
    .to_string();
    assert_eq!(Registry::open(&reg).unwrap().models().len(), 1);
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&trace)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    let best = lines.iter().map(|l| l["value"].as_f64().unwrap()).fold(f64::INFINITY, f64::min);
    let hidden = lines.iter().find(|l| l["value"].as_f64() == Some(best)).unwrap()["config"]["hidden"].as_f64().unwrap();
    let model = Registry::open(&reg).unwrap().model(&id).unwrap();
    assert_eq!(model.descriptor.network.hidden as f64, hidden);
}
