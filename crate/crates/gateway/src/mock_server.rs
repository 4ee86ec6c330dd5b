//! HTTP face of a [`MockSpec`]: `POST /v1/predict` and `GET /v1/health`.
//!
//! Injected failures (`fail_first`) answer 503, `fail` responses answer
//! 500; both count as transport failures for a client.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use babybear_core::mock::{MockPredictor, MockSpec};
use babybear_core::model::{Predictor, PredictorError};

use crate::protocol::{ErrorBody, Health, PredictOutput, PredictRequest, PredictResponse, HEALTH_PATH, PREDICT_PATH};

struct MockState {
    predictor: MockPredictor<f64>,
}

pub fn mock_router(spec: MockSpec) -> Router {
    let state = Arc::new(MockState { predictor: MockPredictor::new(spec) });
    Router::new().route(PREDICT_PATH, post(predict)).route(HEALTH_PATH, get(health)).with_state(state)
}

fn error(status: StatusCode, code: &str, message: impl Into<String>) -> Response {
    (status, Json(ErrorBody::new(code, message))).into_response()
}

async fn predict(State(state): State<Arc<MockState>>, body: Bytes) -> Response {
    let req: PredictRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, "invalid_json", e.to_string()),
    };
    let result = tokio::task::spawn_blocking(move || {
        let texts: Vec<&str> = req.inputs.iter().map(String::as_str).collect();
        state.predictor.predict_batch(&texts)
    })
    .await;
    match result {
        Ok(Ok(preds)) => Json(PredictResponse { outputs: preds.iter().map(PredictOutput::from).collect() }).into_response(),
        Ok(Err(PredictorError::Transport { message, .. })) => error(StatusCode::SERVICE_UNAVAILABLE, "unavailable", message),
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, "failed", e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, "panic", e.to_string()),
    }
}

async fn health(State(state): State<Arc<MockState>>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        name: format!("mock-backend {}", state.predictor.spec().id),
        version: env!("CARGO_PKG_VERSION").into(),
        task: Some(state.predictor.spec().kind),
        requests: state.predictor.calls() as u64,
        documents: 0,
        errors: 0,
    })
}
