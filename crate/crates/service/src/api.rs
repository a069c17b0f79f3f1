//! HTTP/JSON API under `/api/v1/`.
//!
//! | method | path | body |
//! |---|---|---|
//! | GET | `/api/v1/models` | |
//! | GET | `/api/v1/datasets` | |
//! | POST | `/api/v1/forecast` | [`ForecastBody`] |
//! | POST | `/api/v1/whatif` | [`WhatIfBody`] |
//! | POST | `/api/v1/sweep` | [`SweepBody`] |
//!
//! Errors carry `{"error": {"code", "message", "field"}}` with status 404
//! (unknown id), 422 (invalid value, `field` names it), 409 (model and
//! dataset disagree on features), 400 (unparseable body) or 500.

use std::sync::{Arc, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ccforecast_core::architectures::TrainedModel;
use ccforecast_core::causal::{
    impact, sweep_pair, sweep_single, ImpactGrid, Intervention, InterventionSpec, SweepWindow, DEFAULT_WINDOW_DAYS,
    MAX_ABS_DELTA, MAX_INTERVENTIONS, SWEEP_DELTAS,
};
use ccforecast_core::forecast::{check_compatible, forecast, steps_per_day, ForecastMode, ForecastRequest};
use ccforecast_core::ingest::{DatasetEntry, TimeSeriesFrame};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::ServiceError;
use crate::registry::{ModelEntry, Registry};

pub type SharedRegistry = Arc<RwLock<Registry>>;

/// Largest grid a single sweep request may compute.
pub const MAX_SWEEP_CELLS: usize = 81;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub field: Option<String>,
}

impl ApiError {
    fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        ServiceError::invalid(field, message).into()
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let code = e.code();
        let status = match code {
            "not_found" => StatusCode::NOT_FOUND,
            "invalid_request" | "undefined_impact" => StatusCode::UNPROCESSABLE_ENTITY,
            "fingerprint_mismatch" => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let field = match &e {
            ServiceError::Invalid { field, .. } => field.clone(),
            _ => None,
        };
        ApiError {
            status,
            code,
            message: e.to_string(),
            field,
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        let (status, code) = match r {
            JsonRejection::JsonDataError(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_request"),
            _ => (StatusCode::BAD_REQUEST, "bad_request"),
        };
        ApiError {
            status,
            code,
            message: r.body_text(),
            field: None,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({
            "error": { "code": self.code, "message": self.message, "field": self.field }
        });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

pub fn router(registry: SharedRegistry) -> Router {
    Router::new()
        .route("/api/v1/models", get(list_models))
        .route("/api/v1/datasets", get(list_datasets))
        .route("/api/v1/forecast", post(forecast_handler))
        .route("/api/v1/whatif", post(whatif_handler))
        .route("/api/v1/sweep", post(sweep_handler))
        .with_state(registry)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ModelList {
    pub models: Vec<ModelEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetList {
    pub datasets: Vec<DatasetEntry>,
}

async fn list_models(State(reg): State<SharedRegistry>) -> Json<ModelList> {
    Json(ModelList {
        models: reg.read().unwrap().models(),
    })
}

async fn list_datasets(State(reg): State<SharedRegistry>) -> Json<DatasetList> {
    Json(DatasetList {
        datasets: reg.read().unwrap().datasets(),
    })
}

/// Runs `f` on the blocking pool with the model and frame resolved and
/// checked for compatibility.
async fn with_pair<T, F>(reg: SharedRegistry, model: String, dataset: String, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&str, &TrainedModel, &TimeSeriesFrame) -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || {
        let (m, d) = {
            let r = reg.read().unwrap();
            (r.model(&model)?, r.dataset(&dataset)?)
        };
        check_compatible(&m, &d).map_err(ServiceError::from)?;
        f(&model, &m, &d)
    })
    .await
    .map_err(|e| ApiError {
        status: StatusCode::INTERNAL_SERVER_ERROR,
        code: "internal_error",
        message: e.to_string(),
        field: None,
    })?
}

fn core<T>(r: ccforecast_core::Result<T>) -> Result<T, ApiError> {
    r.map_err(|e| ServiceError::from(e).into())
}

/// Resolves an optional start row against the frame and checks the window.
fn window_start(model: &TrainedModel, frame: &TimeSeriesFrame, start: Option<usize>, length: usize, length_field: &str) -> Result<usize, ApiError> {
    if length == 0 {
        return Err(ApiError::invalid(length_field, "must be at least 1"));
    }
    let fc = &model.descriptor.feature_config;
    let min_start = fc.warmup_rows() + fc.window;
    let start = match start {
        Some(s) => s,
        None => frame.len().checked_sub(length).ok_or_else(|| {
            ApiError::invalid(length_field, format!("{length} exceeds the {} rows of the dataset", frame.len()))
        })?,
    };
    if start < min_start {
        return Err(ApiError::invalid(
            "start",
            format!("start {start} precedes the first forecastable row {min_start}"),
        ));
    }
    if start + length > frame.len() {
        return Err(ApiError::invalid(
            length_field,
            format!("start {start} + {length} runs past the {} rows of the dataset", frame.len()),
        ));
    }
    Ok(start)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecastBody {
    pub model: String,
    pub dataset: String,
    /// Frame row of the first step; defaults to the last `horizon` rows.
    #[serde(default)]
    pub start: Option<usize>,
    pub horizon: usize,
    #[serde(default)]
    pub mode: ForecastMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastResponse {
    pub model: String,
    pub dataset: String,
    pub target: String,
    pub start: usize,
    pub mode: ForecastMode,
    pub timestamps: Vec<DateTime<Utc>>,
    pub predicted: Vec<f64>,
    pub actual: Vec<Option<f64>>,
}

async fn forecast_handler(
    State(reg): State<SharedRegistry>,
    body: Result<Json<ForecastBody>, JsonRejection>,
) -> ApiResult<ForecastResponse> {
    let Json(b) = body?;
    let (model_id, dataset_id) = (b.model.clone(), b.dataset.clone());
    with_pair(reg, model_id, dataset_id, move |_, m, d| {
        let start = window_start(m, d, b.start, b.horizon, "horizon")?;
        let r = core(forecast(
            m,
            d,
            &ForecastRequest {
                start,
                horizon: b.horizon,
                mode: b.mode,
            },
        ))?;
        Ok(Json(ForecastResponse {
            model: b.model,
            dataset: b.dataset,
            target: r.target,
            start,
            mode: b.mode,
            timestamps: r.timestamps,
            predicted: r.predicted,
            actual: r.actual,
        }))
    })
    .await
}

/// One intervention on the wire; `delta_pct` is a fraction (0.05 = +5%).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireIntervention {
    pub feature: String,
    pub delta_pct: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WhatIfBody {
    pub model: String,
    pub dataset: String,
    #[serde(default)]
    pub start: Option<usize>,
    /// Steps in the window; defaults to two days.
    #[serde(default)]
    pub length: Option<usize>,
    #[serde(default)]
    pub interventions: Vec<WireIntervention>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhatIfResponse {
    pub model: String,
    pub dataset: String,
    pub target: String,
    pub start: usize,
    pub length: usize,
    pub interventions: Vec<WireIntervention>,
    pub timestamps: Vec<DateTime<Utc>>,
    pub baseline: Vec<f64>,
    pub counterfactual: Vec<f64>,
    pub impact_pct: f64,
}

fn check_interventions(ivs: &[WireIntervention], inputs: &[String]) -> Result<(), ApiError> {
    if ivs.len() > MAX_INTERVENTIONS {
        return Err(ApiError::invalid(
            "interventions",
            format!("at most {MAX_INTERVENTIONS} interventions, got {}", ivs.len()),
        ));
    }
    for (i, iv) in ivs.iter().enumerate() {
        if !inputs.contains(&iv.feature) {
            return Err(ApiError::invalid(
                format!("interventions[{i}].feature"),
                format!("`{}` is not an input of this model", iv.feature),
            ));
        }
        if ivs[..i].iter().any(|o| o.feature == iv.feature) {
            return Err(ApiError::invalid(
                format!("interventions[{i}].feature"),
                format!("`{}` appears more than once", iv.feature),
            ));
        }
        if !(iv.delta_pct.is_finite() && iv.delta_pct.abs() <= MAX_ABS_DELTA) {
            return Err(ApiError::invalid(
                format!("interventions[{i}].delta_pct"),
                format!("{} is outside [-{MAX_ABS_DELTA}, {MAX_ABS_DELTA}]", iv.delta_pct),
            ));
        }
    }
    Ok(())
}

fn default_length(frame: &TimeSeriesFrame) -> usize {
    DEFAULT_WINDOW_DAYS * steps_per_day(frame.interval_s())
}

async fn whatif_handler(
    State(reg): State<SharedRegistry>,
    body: Result<Json<WhatIfBody>, JsonRejection>,
) -> ApiResult<WhatIfResponse> {
    let Json(b) = body?;
    let (model_id, dataset_id) = (b.model.clone(), b.dataset.clone());
    with_pair(reg, model_id, dataset_id, move |_, m, d| {
        check_interventions(&b.interventions, &m.descriptor.feature_config.inputs)?;
        let length = b.length.unwrap_or_else(|| default_length(d));
        let start = window_start(m, d, b.start, length, "length")?;
        let spec = InterventionSpec {
            interventions: b
                .interventions
                .iter()
                .map(|iv| Intervention::new(&iv.feature, iv.delta_pct))
                .collect(),
            start,
            length,
        };
        let r = core(impact(m, d, &spec))?;
        Ok(Json(WhatIfResponse {
            model: b.model,
            dataset: b.dataset,
            target: r.target,
            start,
            length,
            interventions: b.interventions,
            timestamps: r.timestamps,
            baseline: r.baseline,
            counterfactual: r.counterfactual,
            impact_pct: r.impact_pct,
        }))
    })
    .await
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    #[default]
    Single,
    Pair,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepBody {
    pub model: String,
    pub dataset: String,
    #[serde(default)]
    pub start: Option<usize>,
    #[serde(default)]
    pub length: Option<usize>,
    #[serde(default)]
    pub kind: SweepKind,
    /// Single: the swept features (empty = every input). Pair: exactly two.
    #[serde(default)]
    pub features: Vec<String>,
}

fn check_sweep_features(b: &SweepBody, inputs: &[String]) -> Result<(), ApiError> {
    for (i, f) in b.features.iter().enumerate() {
        if !inputs.contains(f) {
            return Err(ApiError::invalid(
                format!("features[{i}]"),
                format!("`{f}` is not an input of this model"),
            ));
        }
        if b.features[..i].contains(f) {
            return Err(ApiError::invalid(format!("features[{i}]"), format!("`{f}` appears more than once")));
        }
    }
    let cells = match b.kind {
        SweepKind::Pair => {
            if b.features.len() != 2 {
                return Err(ApiError::invalid(
                    "features",
                    format!("a pair sweep needs exactly 2 features, got {}", b.features.len()),
                ));
            }
            SWEEP_DELTAS.len() * SWEEP_DELTAS.len()
        }
        SweepKind::Single => {
            let rows = if b.features.is_empty() { inputs.len() } else { b.features.len() };
            rows * SWEEP_DELTAS.len()
        }
    };
    if cells > MAX_SWEEP_CELLS {
        return Err(ApiError::invalid(
            "features",
            format!("{cells} cells requested; the limit is {MAX_SWEEP_CELLS}"),
        ));
    }
    Ok(())
}

async fn sweep_handler(
    State(reg): State<SharedRegistry>,
    body: Result<Json<SweepBody>, JsonRejection>,
) -> ApiResult<ImpactGrid> {
    let Json(b) = body?;
    let (model_id, dataset_id) = (b.model.clone(), b.dataset.clone());
    with_pair(reg, model_id, dataset_id, move |id, m, d| {
        check_sweep_features(&b, &m.descriptor.feature_config.inputs)?;
        let length = b.length.unwrap_or_else(|| default_length(d));
        let start = window_start(m, d, b.start, length, "length")?;
        let window = SweepWindow { start, length };
        let grid = match b.kind {
            SweepKind::Single => sweep_single(m, id, d, &b.features, window),
            SweepKind::Pair => sweep_pair(m, id, d, &b.features[0], &b.features[1], window),
        };
        Ok(Json(core(grid)?))
    })
    .await
}

/// Serves the API on `addr` until interrupted.
pub async fn serve(registry: SharedRegistry, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(registry))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
