//! The triage service: `POST /v1/triage`, `GET /v1/health`, `GET /v1/config`.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use babybear_core::corpus::Document;
use babybear_core::entity::{triage_documents, EntityError, EntityPipeline, NerOutcome, Route};
use babybear_core::triage::{triage_batch, TriageError, TriageOutcome};

use crate::config::{ActiveCascade, CascadeConfig, ConfigFileError};
use crate::protocol::{
    ErrorBody, ErrorDetail, Health, TriageOutput, TriageRequest, TriageResponse, CONFIG_PATH, HEALTH_PATH, TRIAGE_PATH,
};

pub const SERVICE_NAME: &str = "babybear";

struct ServiceState {
    cascade: ActiveCascade,
    config: CascadeConfig,
    requests: AtomicU64,
    documents: AtomicU64,
    errors: AtomicU64,
}

/// Builds the service router; fails if the config does not build.
pub fn service_router(config: CascadeConfig) -> Result<Router, ConfigFileError> {
    let cascade = config.build()?;
    let state = Arc::new(ServiceState {
        cascade,
        config,
        requests: AtomicU64::new(0),
        documents: AtomicU64::new(0),
        errors: AtomicU64::new(0),
    });
    Ok(Router::new()
        .route(TRIAGE_PATH, post(triage))
        .route(HEALTH_PATH, get(health))
        .route(CONFIG_PATH, get(config_handler))
        .with_state(state))
}

/// A failed request: HTTP status plus the machine-readable body.
#[derive(Debug, Clone, PartialEq)]
pub struct ServiceError {
    pub status: StatusCode,
    pub detail: ErrorDetail,
}

impl ServiceError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ServiceError { status, detail: ErrorBody::new(code, message).error }
    }

    fn backend(stage: usize, stage_id: String, message: String) -> Self {
        let mut e = Self::new(StatusCode::BAD_GATEWAY, "backend_unavailable", message);
        e.detail.stage = Some(stage);
        e.detail.stage_id = Some(stage_id);
        e
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { error: self.detail })).into_response()
    }
}

pub fn classification_output(o: &TriageOutcome<f64>) -> TriageOutput {
    TriageOutput {
        id: o.doc_id.clone(),
        label: o.label().map(str::to_string),
        entities: None,
        answering_stage: o.answering_stage,
        confidence: o.confidence(),
    }
}

fn route_stage(route: Route) -> usize {
    match route {
        Route::Skipped => 0,
        Route::Mamabear | Route::Distil => 1,
        Route::Bert => 2,
    }
}

/// The deepest stage any sentence reached (0 when every sentence was
/// skipped) and the lowest sentence-gate confidence.
pub fn entity_output(o: &NerOutcome<f64>) -> TriageOutput {
    TriageOutput {
        id: o.doc_id.clone(),
        label: None,
        entities: Some(o.predicted.clone()),
        answering_stage: o.verdicts.iter().map(|v| route_stage(v.routed_to)).max().unwrap_or(0),
        confidence: o.verdicts.iter().map(|v| v.confidence).fold(1.0, f64::min),
    }
}

fn entity_stage_index(pipeline: &EntityPipeline<f64>, stage: &str) -> usize {
    match stage {
        "entity gate" => 0,
        "distil gate" | "distil backend" => 1,
        _ => 1 + usize::from(pipeline.distil.is_some()),
    }
}

/// Triage shared by the HTTP handler and in-process callers.
pub fn run_triage(cascade: &ActiveCascade, req: &TriageRequest) -> Result<TriageResponse, ServiceError> {
    if let Some(input) = req.inputs.iter().find(|i| i.text.trim().is_empty()) {
        return Err(ServiceError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "empty_text",
            format!("input {:?} has empty text", input.id),
        ));
    }
    let docs: Vec<Document> = req.inputs.iter().map(|i| Document::new(i.id.clone(), i.text.clone())).collect();
    let outputs = match cascade {
        ActiveCascade::Classification(c) => triage_batch(c, &docs)
            .map_err(|e| match e {
                TriageError::Backend { stage, ref stage_id, .. } => ServiceError::backend(stage, stage_id.clone(), e.to_string()),
                other => ServiceError::new(StatusCode::INTERNAL_SERVER_ERROR, "triage_failed", other.to_string()),
            })?
            .iter()
            .map(classification_output)
            .collect(),
        ActiveCascade::Entity(p) => triage_documents(p, &docs)
            .map_err(|e| match e {
                EntityError::Backend { stage, ref stage_id, .. } => {
                    ServiceError::backend(entity_stage_index(p, stage), stage_id.clone(), e.to_string())
                }
                other => ServiceError::new(StatusCode::INTERNAL_SERVER_ERROR, "triage_failed", other.to_string()),
            })?
            .iter()
            .map(entity_output)
            .collect(),
    };
    Ok(TriageResponse { outputs })
}

async fn triage(State(state): State<Arc<ServiceState>>, body: Bytes) -> Response {
    state.requests.fetch_add(1, Ordering::Relaxed);
    let req: TriageRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => {
            state.errors.fetch_add(1, Ordering::Relaxed);
            return ServiceError::new(StatusCode::BAD_REQUEST, "invalid_json", e.to_string()).into_response();
        }
    };
    let n = req.inputs.len() as u64;
    let worker = state.clone();
    let result = tokio::task::spawn_blocking(move || run_triage(&worker.cascade, &req)).await;
    match result {
        Ok(Ok(resp)) => {
            state.documents.fetch_add(n, Ordering::Relaxed);
            Json(resp).into_response()
        }
        Ok(Err(e)) => {
            state.errors.fetch_add(1, Ordering::Relaxed);
            e.into_response()
        }
        Err(e) => {
            state.errors.fetch_add(1, Ordering::Relaxed);
            ServiceError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()).into_response()
        }
    }
}

async fn health(State(state): State<Arc<ServiceState>>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        name: SERVICE_NAME.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        task: Some(state.cascade.task()),
        requests: state.requests.load(Ordering::Relaxed),
        documents: state.documents.load(Ordering::Relaxed),
        errors: state.errors.load(Ordering::Relaxed),
    })
}

async fn config_handler(State(state): State<Arc<ServiceState>>) -> Json<CascadeConfig> {
    Json(state.config.clone())
}
