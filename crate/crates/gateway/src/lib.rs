//! HTTP front end for the routing pipeline.
//!
//! `POST /v1/infer` runs one prompt, `GET /healthz` reports readiness and
//! backend reachability, `GET /metrics` returns cumulative counters. Field
//! reference: `docs/api.md`.

pub mod config;
pub mod metrics;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;
use veil_core::bootstrap;
use veil_core::collab::{BackendRole, DemoLibrary, StageTokens};
use veil_core::config::PrivacyConfig;
use veil_core::domain::PrivacyBudget;
use veil_core::gating::{GatingModel, Mode};
pub use veil_core::ldp::derive_seed;
use veil_core::ldp::verify_ldp_bound;
use veil_core::pipeline::{Outcome, PerturbationAudit, Pipeline, PipelineError};

use crate::config::GatewayConfig;
use crate::metrics::{Metrics, VerifierStatus};

#[derive(Debug, Error)]
pub enum StartupError {
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Privacy(#[from] veil_core::config::ConfigError),
    #[error("{path}: {message}")]
    Model { path: String, message: String },
    #[error("gating model: {0}")]
    Gating(#[from] veil_core::gating::GatingError),
    #[error("pipeline: {0}")]
    Pipeline(#[from] PipelineError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Settings {
    pub max_prompt_bytes: usize,
    pub api_key: Option<String>,
    pub master_seed: u64,
}

impl From<&GatewayConfig> for Settings {
    fn from(c: &GatewayConfig) -> Self {
        Self {
            max_prompt_bytes: c.max_prompt_bytes,
            api_key: c.api_key.clone(),
            master_seed: c.master_seed,
        }
    }
}

pub struct AppState {
    pub settings: Settings,
    pub metrics: Metrics,
    pipeline: OnceLock<Arc<Pipeline>>,
    counter: AtomicU64,
    limiter: Semaphore,
}

impl AppState {
    /// Not ready until [`AppState::install`] is called.
    pub fn new(settings: Settings, max_in_flight: usize) -> Arc<Self> {
        Arc::new(Self {
            settings,
            metrics: Metrics::default(),
            pipeline: OnceLock::new(),
            counter: AtomicU64::new(0),
            limiter: Semaphore::new(max_in_flight.max(1)),
        })
    }

    pub fn install(&self, pipeline: Pipeline, verifier: VerifierStatus) {
        self.metrics.set_verifier(verifier);
        let _ = self.pipeline.set(Arc::new(pipeline));
    }

    pub fn pipeline(&self) -> Option<&Arc<Pipeline>> {
        self.pipeline.get()
    }
}

pub fn load_model(
    config: &GatewayConfig,
    privacy: &PrivacyConfig,
) -> Result<GatingModel, StartupError> {
    match &config.model_path {
        Some(path) => {
            let doc = std::fs::read_to_string(path).map_err(|e| StartupError::Model {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            GatingModel::from_json(&doc).map_err(|e| StartupError::Model {
                path: path.display().to_string(),
                message: e.to_string(),
            })
        }
        None => Ok(bootstrap::default_model(&privacy.table, &privacy.lexicon)?),
    }
}

pub fn build_pipeline(config: &GatewayConfig) -> Result<Pipeline, StartupError> {
    let privacy = match &config.privacy_config {
        Some(path) => PrivacyConfig::from_path(path)?,
        None => PrivacyConfig::bundled(),
    }
    .with_env_overrides()?;
    let model = load_model(config, &privacy)?;
    let cloud = config.cloud.build(BackendRole::Cloud, &privacy.table);
    let edge = config.edge.build(BackendRole::Edge, &privacy.table);
    Ok(Pipeline::new(
        privacy,
        model,
        DemoLibrary::bundled(),
        cloud,
        edge,
        config.collab_options(),
    )?)
}

pub const VERIFIER_WEIGHTS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

/// Bound check of the configured table and budget, run once at startup.
pub fn run_verifier(pipeline: &Pipeline) -> VerifierStatus {
    let budget = pipeline.config.budget;
    let (status, max_log_ratio) =
        match verify_ldp_bound(&pipeline.config.table, &budget, &VERIFIER_WEIGHTS) {
            Ok(report) => {
                let max = report
                    .records
                    .iter()
                    .map(|r| r.max_log_ratio.unwrap_or(f64::INFINITY))
                    .fold(f64::NEG_INFINITY, f64::max);
                (if report.passed { "pass" } else { "fail" }, Some(max))
            }
            Err(_) => ("error", None),
        };
    VerifierStatus {
        status: status.to_string(),
        epsilon_total: budget.epsilon_total(),
        alpha: budget.alpha(),
        grid_points: VERIFIER_WEIGHTS.len(),
        max_log_ratio,
    }
}

/// Builds the pipeline, runs the verifier and marks the state ready.
pub fn initialize(state: &AppState, config: &GatewayConfig) -> Result<(), StartupError> {
    let pipeline = build_pipeline(config)?;
    let verifier = run_verifier(&pipeline);
    state.install(pipeline, verifier);
    Ok(())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/infer", post(infer))
        .route("/healthz", get(healthz))
        .route("/metrics", get(metrics_handler))
        .with_state(state)
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceRequest {
    pub prompt: String,
    #[serde(default)]
    pub budget_override: Option<PrivacyBudget>,
    #[serde(default)]
    pub seed_override: Option<u64>,
    #[serde(default)]
    pub trace: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Pi {
    pub cloud: f64,
    pub collab: f64,
    pub local: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RiskSummary {
    pub risk_score: f64,
    pub context_flag: bool,
    pub entities: usize,
    pub flagged: usize,
    pub categories: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TimingsMs {
    pub perturb: f64,
    pub cloud: f64,
    pub edge: f64,
    /// Sum of the stages.
    pub total: f64,
    /// Measured around the whole request.
    pub wall: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DispatchCounts {
    pub cloud_calls: u32,
    pub edge_calls: u32,
}

/// Enough to recompute `pi` offline from the model.
#[derive(Debug, Clone, Serialize)]
pub struct Trace {
    pub features: Vec<f64>,
    pub seed: u64,
    pub lambda: f64,
    pub sketch_degraded: Option<bool>,
}

#[derive(Debug, Clone, Serialize)]
pub struct InferenceResponse {
    pub request_id: String,
    pub response: String,
    pub mode: Mode,
    pub pi: Pi,
    pub risk: RiskSummary,
    pub timings_ms: TimingsMs,
    pub tokens: StageTokens,
    pub dispatch: DispatchCounts,
    pub audit: Option<PerturbationAudit>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<Trace>,
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

fn render(
    request_id: String,
    out: Outcome,
    wall: Duration,
    seed: u64,
    lambda: f64,
    trace: bool,
) -> InferenceResponse {
    let r = &out.routing;
    let pi = r.distribution.pi;
    InferenceResponse {
        request_id,
        pi: Pi {
            cloud: pi[Mode::Cloud.index()],
            collab: pi[Mode::Collab.index()],
            local: pi[Mode::Local.index()],
        },
        risk: RiskSummary {
            risk_score: r.profile.risk_score,
            context_flag: r.profile.context_flag,
            entities: r.prompt.entities.len(),
            flagged: r.profile.flagged_count(),
            categories: r
                .prompt
                .entities
                .iter()
                .map(|e| e.category.to_string())
                .collect(),
        },
        timings_ms: TimingsMs {
            perturb: ms(out.timings.perturb),
            cloud: ms(out.timings.cloud),
            edge: ms(out.timings.edge),
            total: ms(out.total_latency()),
            wall: ms(wall),
        },
        tokens: out.tokens,
        dispatch: DispatchCounts {
            cloud_calls: out.cloud_calls,
            edge_calls: out.edge_calls,
        },
        trace: trace.then(|| Trace {
            features: r.features.0.clone(),
            seed,
            lambda,
            sketch_degraded: out.sketch.as_ref().map(|s| s.degraded),
        }),
        audit: out.audit,
        mode: out.mode,
        response: out.response,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ErrorBody {
    pub kind: &'static str,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub incident_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub request_id: Option<String>,
}

fn error(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Response {
    error_body(
        status,
        ErrorBody {
            kind,
            message: message.into(),
            stage: None,
            incident_id: None,
            request_id: None,
        },
    )
}

fn error_body(status: StatusCode, body: ErrorBody) -> Response {
    (status, Json(serde_json::json!({ "error": body }))).into_response()
}

fn authorized(settings: &Settings, headers: &HeaderMap) -> bool {
    let Some(key) = &settings.api_key else {
        return true;
    };
    let bearer = headers
        .get("authorization")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    let plain = headers.get("x-api-key").and_then(|v| v.to_str().ok());
    bearer == Some(key.as_str()) || plain == Some(key.as_str())
}

async fn infer(State(state): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> Response {
    if !authorized(&state.settings, &headers) {
        state.metrics.record_rejected();
        return error(
            StatusCode::UNAUTHORIZED,
            "unauthorized",
            "missing or wrong API key",
        );
    }
    let Some(pipeline) = state.pipeline().cloned() else {
        return error(
            StatusCode::SERVICE_UNAVAILABLE,
            "not_ready",
            "service is initializing",
        );
    };
    let request: InferenceRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => {
            state.metrics.record_rejected();
            return error(StatusCode::BAD_REQUEST, "bad_request", e.to_string());
        }
    };
    if request.prompt.trim().is_empty() {
        state.metrics.record_rejected();
        return error(StatusCode::BAD_REQUEST, "bad_request", "prompt is empty");
    }
    if request.prompt.len() > state.settings.max_prompt_bytes {
        state.metrics.record_rejected();
        return error(
            StatusCode::PAYLOAD_TOO_LARGE,
            "prompt_too_large",
            format!(
                "prompt is {} bytes, limit is {}",
                request.prompt.len(),
                state.settings.max_prompt_bytes
            ),
        );
    }

    let n = state.counter.fetch_add(1, Ordering::Relaxed) + 1;
    let request_id = format!("req-{n:06}");
    let seed = request
        .seed_override
        .unwrap_or_else(|| derive_seed(state.settings.master_seed, n));
    let _permit = state
        .limiter
        .acquire()
        .await
        .expect("semaphore is never closed");

    let started = Instant::now();
    let worker = pipeline.clone();
    let prompt = request.prompt;
    let budget = request.budget_override;
    let joined =
        tokio::task::spawn_blocking(move || worker.infer(&prompt, budget.as_ref(), seed)).await;
    let wall = started.elapsed();

    let result = match joined {
        Ok(r) => r,
        Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
    };
    match result {
        Ok(out) => {
            state.metrics.record_served(
                out.mode,
                out.timings.perturb,
                out.timings.cloud,
                out.timings.edge,
                wall,
                &out.tokens,
            );
            tracing::info!(
                request_id = %request_id,
                mode = %out.mode,
                cloud_calls = out.cloud_calls,
                edge_calls = out.edge_calls,
                perturb_ms = ms(out.timings.perturb),
                cloud_ms = ms(out.timings.cloud),
                edge_ms = ms(out.timings.edge),
                wall_ms = ms(wall),
                "served"
            );
            let lambda = pipeline.model.lambda;
            Json(render(request_id, out, wall, seed, lambda, request.trace)).into_response()
        }
        Err(PipelineError::Privacy(fault)) => {
            state.metrics.record_privacy_fault();
            let incident_id = format!("inc-{n:06}");
            tracing::error!(
                request_id = %request_id,
                incident_id = %incident_id,
                stage = %fault.stage,
                category = %fault.category,
                entity_index = fault.entity_index,
                "privacy fault, response suppressed"
            );
            error_body(
                StatusCode::INTERNAL_SERVER_ERROR,
                ErrorBody {
                    kind: "privacy_fault",
                    message: fault.to_string(),
                    stage: Some(fault.stage.to_string()),
                    incident_id: Some(incident_id),
                    request_id: Some(request_id),
                },
            )
        }
        Err(PipelineError::Backend { stage, source }) => {
            state.metrics.record_backend_failure();
            tracing::warn!(request_id = %request_id, stage = %stage, error = %source, "backend failure");
            error_body(
                StatusCode::BAD_GATEWAY,
                ErrorBody {
                    kind: "backend",
                    message: source.to_string(),
                    stage: Some(stage.to_string()),
                    incident_id: None,
                    request_id: Some(request_id),
                },
            )
        }
        Err(e) => {
            tracing::error!(request_id = %request_id, error = %e, "request failed");
            error(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ComponentHealth {
    pub name: String,
    pub status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModeAvailability {
    pub cloud: &'static str,
    pub collab: &'static str,
    pub local: &'static str,
}

#[derive(Debug, Clone, Serialize)]
pub struct Health {
    pub status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub table: Option<&'static str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<&'static str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cloud: Option<ComponentHealth>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub edge: Option<ComponentHealth>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub modes: Option<ModeAvailability>,
}

fn availability(up: bool) -> &'static str {
    if up {
        "available"
    } else {
        "unavailable"
    }
}

async fn healthz(State(state): State<Arc<AppState>>) -> Response {
    let Some(pipeline) = state.pipeline().cloned() else {
        let doc = Health {
            status: "not-ready",
            table: None,
            model: None,
            cloud: None,
            edge: None,
            modes: None,
        };
        return (StatusCode::SERVICE_UNAVAILABLE, Json(doc)).into_response();
    };
    let probed = tokio::task::spawn_blocking(move || {
        let probe = |b: &veil_core::collab::Backend| {
            let result = b.probe();
            ComponentHealth {
                name: b.name().to_string(),
                status: if result.is_ok() { "ok" } else { "unreachable" },
                error: result.err().map(|e| e.to_string()),
            }
        };
        (probe(&pipeline.cloud), probe(&pipeline.edge))
    })
    .await;
    let Ok((cloud, edge)) = probed else {
        return error(
            StatusCode::INTERNAL_SERVER_ERROR,
            "internal",
            "health probe panicked",
        );
    };
    let cloud_up = cloud.status == "ok";
    let edge_up = edge.status == "ok";
    let doc = Health {
        status: if cloud_up && edge_up {
            "ok"
        } else {
            "degraded"
        },
        table: Some("ok"),
        model: Some("ok"),
        modes: Some(ModeAvailability {
            cloud: availability(cloud_up),
            collab: availability(cloud_up && edge_up),
            local: availability(edge_up),
        }),
        cloud: Some(cloud),
        edge: Some(edge),
    };
    Json(doc).into_response()
}

async fn metrics_handler(State(state): State<Arc<AppState>>) -> Response {
    Json(state.metrics.snapshot()).into_response()
}
