mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use axum::routing::post;
use axum::Router;
use babybear_core::entity::triage_documents;
use babybear_core::mock::{MockResponse, MockSpec};
use babybear_core::model::{LabelDistribution, Predictor, PredictorError, TaskKind};
use babybear_core::triage::triage_batch;
use babybear_gateway::backend::HttpBackend;
use babybear_gateway::config::ActiveCascade;
use babybear_gateway::protocol::{ErrorBody, Health, TriageResponse};
use babybear_gateway::{mock_router, service_router, BackgroundServer, CascadeConfig};
use common::*;

fn ab() -> Vec<String> {
    vec!["a".into(), "b".into()]
}

fn fixed_spec(fail_first: usize) -> MockSpec {
    let d = LabelDistribution::new(ab(), vec![0.25, 0.75]).unwrap();
    MockSpec { fail_first, ..MockSpec::classification("fixed", ab(), MockResponse::Distribution(d)) }
}

#[test]
fn backend_echoes_fixed_distribution() {
    let server = BackgroundServer::start(mock_router(fixed_spec(0)), "127.0.0.1:0").unwrap();
    let b = HttpBackend::new(descriptor("fixed", &server.url(), TaskKind::Classification, ab())).unwrap();
    let out = b.predict_batch(&["x", "y"]).unwrap();
    assert_eq!(out.len(), 2);
    for p in out {
        assert_eq!(p.distribution().unwrap().probs(), &[0.25, 0.75]);
    }
    assert_eq!(b.retries(), 0);
}

#[test]
fn two_failures_then_success_records_two_retries() {
    let server = BackgroundServer::start(mock_router(fixed_spec(2)), "127.0.0.1:0").unwrap();
    let d = babybear_gateway::BackendDescriptor { max_retries: 3, ..descriptor("fixed", &server.url(), TaskKind::Classification, ab()) };
    let b = HttpBackend::new(d).unwrap();
    assert!(b.predict("x").is_ok());
    assert_eq!(b.retries(), 2);
    assert_eq!(b.requests(), 3);
}

#[test]
fn malformed_response_is_not_retried() {
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    let router = Router::new().route(
        "/v1/predict",
        post(move || {
            counter.fetch_add(1, Ordering::SeqCst);
            async { r#"{"outputs":[{"distribution":{"a":0.5,"b":0.3}}]}"# }
        }),
    );
    let server = BackgroundServer::start(router, "127.0.0.1:0").unwrap();
    let b = HttpBackend::new(descriptor("bad", &server.url(), TaskKind::Classification, ab())).unwrap();
    match b.predict("x") {
        Err(PredictorError::Protocol { excerpt, .. }) => assert!(excerpt.contains("0.3"), "{excerpt}"),
        other => panic!("{other:?}"),
    }
    assert_eq!(hits.load(Ordering::SeqCst), 1);
    assert_eq!(b.retries(), 0);
}

#[test]
fn service_matches_library_for_classification() {
    let dir = tempfile::tempdir().unwrap();
    let fx = classification_fixture(dir.path(), 100, 11);
    let mama = BackgroundServer::start(mock_router(fx.mamabear.clone()), "127.0.0.1:0").unwrap();
    let remote = classification_config(&fx, 0.4, Some(&mama.url()));
    let service = BackgroundServer::start(service_router(remote).unwrap(), "127.0.0.1:0").unwrap();

    let (status, body) = http_post(&format!("{}/v1/triage", service.url()), &serde_json::to_string(&triage_request(&fx.docs)).unwrap());
    assert_eq!(status, 200, "{body}");
    let got: TriageResponse = serde_json::from_str(&body).unwrap();

    let ActiveCascade::Classification(local) = classification_config(&fx, 0.4, None).build().unwrap() else { panic!() };
    let want = triage_batch(&local, &fx.docs).unwrap();
    assert_eq!(got.outputs.len(), want.len());
    let mut escalated = 0;
    for (g, w) in got.outputs.iter().zip(&want) {
        assert_eq!(g.id, w.doc_id);
        assert_eq!(g.label.as_deref(), w.label());
        assert_eq!(g.answering_stage, w.answering_stage);
        assert_eq!(g.confidence, w.confidence());
        escalated += w.answering_stage;
    }
    assert!(escalated > 0 && escalated < 100, "{escalated}");
}

#[test]
fn service_matches_library_for_entities() {
    let fx = entity_fixture(60, 3, 5);
    let bert = BackgroundServer::start(mock_router(fx.ner.clone()), "127.0.0.1:0").unwrap();
    let service = BackgroundServer::start(service_router(entity_config(&fx, 0.7, Some(&bert.url()))).unwrap(), "127.0.0.1:0").unwrap();
    let (status, body) = http_post(&format!("{}/v1/triage", service.url()), &serde_json::to_string(&triage_request(&fx.docs)).unwrap());
    assert_eq!(status, 200, "{body}");
    let got: TriageResponse = serde_json::from_str(&body).unwrap();

    let ActiveCascade::Entity(local) = entity_config(&fx, 0.7, None).build().unwrap() else { panic!() };
    let want = triage_documents(&local, &fx.docs).unwrap();
    for (g, w) in got.outputs.iter().zip(&want) {
        assert_eq!(g.id, w.doc_id);
        assert_eq!(g.entities.as_ref(), Some(&w.predicted));
        assert!(g.label.is_none());
    }
}

#[test]
fn request_errors_and_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let fx = classification_fixture(dir.path(), 20, 3);
    let cfg = classification_config(&fx, 0.6, None);
    let service = BackgroundServer::start(service_router(cfg.clone()).unwrap(), "127.0.0.1:0").unwrap();
    let triage = format!("{}/v1/triage", service.url());

    let (status, body) = http_post(&triage, r#"{"inputs":[]}"#);
    assert_eq!((status, body.as_str()), (200, r#"{"outputs":[]}"#));

    let (status, body) = http_post(&triage, r#"{"inputs": 3"#);
    assert_eq!(status, 400);
    assert_eq!(serde_json::from_str::<ErrorBody>(&body).unwrap().error.code, "invalid_json");

    let (status, body) = http_post(&triage, r#"{"inputs":[{"id":"x","text":"  "}]}"#);
    assert_eq!(status, 422);
    assert_eq!(serde_json::from_str::<ErrorBody>(&body).unwrap().error.code, "empty_text");

    let (status, body) = http_get(&format!("{}/v1/health", service.url()));
    assert_eq!(status, 200);
    let h: Health = serde_json::from_str(&body).unwrap();
    assert_eq!(h.version, env!("CARGO_PKG_VERSION"));
    assert_eq!(h.task, Some(TaskKind::Classification));
    assert_eq!((h.requests, h.errors), (3, 2));

    let (status, body) = http_get(&format!("{}/v1/config", service.url()));
    assert_eq!(status, 200);
    let served: CascadeConfig = serde_json::from_str(&body).unwrap();
    assert_eq!(served, cfg);
    assert_eq!(served.thresholds(), vec![0.6]);
}

#[test]
fn backend_outage_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let fx = classification_fixture(dir.path(), 20, 4);
    let dead = {
        let s = BackgroundServer::start(mock_router(fx.mamabear.clone()), "127.0.0.1:0").unwrap();
        s.url()
    };
    let mut cfg = classification_config(&fx, 1.0, Some(&dead));
    if let babybear_gateway::StageSource::Backend(d) = &mut cfg.stages[1].source {
        d.max_retries = 1;
    }
    let service = BackgroundServer::start(service_router(cfg).unwrap(), "127.0.0.1:0").unwrap();
    let (status, body) = http_post(&format!("{}/v1/triage", service.url()), &serde_json::to_string(&triage_request(&fx.docs[..2])).unwrap());
    assert_eq!(status, 502, "{body}");
    let err = serde_json::from_str::<ErrorBody>(&body).unwrap().error;
    assert_eq!(err.code, "backend_unavailable");
    assert_eq!(err.stage, Some(1));
    assert_eq!(err.stage_id.as_deref(), Some("mamabear"));
}
