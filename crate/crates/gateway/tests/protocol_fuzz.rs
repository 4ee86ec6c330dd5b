mod common;

use std::collections::BTreeMap;

use babybear_core::model::TaskKind;
use babybear_gateway::protocol::*;
use common::{output, triage_output};
use proptest::prelude::*;

fn roundtrip<T: serde::Serialize + serde::de::DeserializeOwned + PartialEq + std::fmt::Debug>(v: &T) {
    let text = serde_json::to_string(v).unwrap();
    let back: T = serde_json::from_str(&text).unwrap();
    assert_eq!(&back, v);
}

proptest! {
    #[test]
    fn predict_response_roundtrips(outputs in prop::collection::vec(output(), 0..8)) {
        roundtrip(&PredictResponse { outputs });
    }

    #[test]
    fn predict_request_roundtrips(inputs in prop::collection::vec("\\PC{0,40}", 0..8)) {
        roundtrip(&PredictRequest { inputs });
    }

    #[test]
    fn triage_messages_roundtrip(outputs in prop::collection::vec(triage_output(), 0..8), ids in prop::collection::vec(("\\PC{1,8}", "\\PC{1,30}"), 0..6)) {
        roundtrip(&TriageResponse { outputs });
        roundtrip(&TriageRequest { inputs: ids.into_iter().map(|(id, text)| TriageInput { id, text }).collect() });
    }

    #[test]
    fn error_and_health_roundtrip(code in "[a-z_]{1,20}", message in "\\PC{0,60}", stage in prop::option::of(0usize..5), n in any::<u64>()) {
        let mut e = ErrorBody::new(code, message);
        e.error.stage = stage;
        e.error.stage_id = stage.map(|s| format!("stage{s}"));
        roundtrip(&e);
        roundtrip(&Health { status: "ok".into(), name: "x".into(), version: "1".into(), task: Some(TaskKind::EntityRecognition), requests: n, documents: n / 2, errors: 0 });
    }

    #[test]
    fn decoded_distributions_are_bit_exact(raw in prop::collection::vec(0.001f64..1.0, 2..6)) {
        let total: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|p| p / total).collect();
        let labels: Vec<String> = (0..probs.len()).map(|i| format!("l{i}")).collect();
        let map: BTreeMap<String, f64> = labels.iter().cloned().zip(probs.iter().copied()).collect();
        let body = serde_json::to_string(&PredictResponse { outputs: vec![PredictOutput::Distribution(map)] }).unwrap();
        let got = decode_predict_response(&body, &["t"], TaskKind::Classification, &labels).unwrap();
        let d = got[0].distribution().unwrap();
        prop_assert_eq!(d.labels(), labels.as_slice());
        prop_assert_eq!(d.probs(), probs.as_slice());
    }

    #[test]
    fn arbitrary_bodies_never_panic(body in "\\PC{0,200}") {
        let _ = decode_predict_response(&body, &["a", "b"], TaskKind::Classification, &["x".to_string(), "y".to_string()]);
        let _ = decode_predict_response(&body, &["a"], TaskKind::EntityRecognition, &[]);
    }
}
