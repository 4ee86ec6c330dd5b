#![allow(dead_code)]

use std::path::{Path, PathBuf};

use babybear_core::corpus::{Document, EntitySpan};
use babybear_core::mock::MockSpec;
use babybear_core::model::{train_baby, TaskKind, TrainConfig, NO_ENTITY, WITH_ENTITY};
use babybear_core::synth::{perfect_entity_gate, synthetic_classification, synthetic_tagged, tagged_documents, TOPICS};
use babybear_core::BabyModel;
use babybear_gateway::backend::BackendDescriptor;
use babybear_gateway::config::{CascadeConfig, StageConfig, StageSource};
use babybear_gateway::protocol::{PredictOutput, TriageInput, TriageOutput, TriageRequest};
use proptest::prelude::*;

pub struct ClassificationFixture {
    pub docs: Vec<Document>,
    pub mamabear: MockSpec,
    pub model_dir: PathBuf,
}

/// Synthetic topic corpus with a baby model trained on its first half.
pub fn classification_fixture(dir: &Path, n: usize, seed: u64) -> ClassificationFixture {
    let synth = synthetic_classification(n * 2, 0.8, 0.98, seed);
    let (train, docs) = synth.docs.split_at(n);
    let examples: Vec<(String, String)> =
        train.iter().map(|d| (d.text.clone(), d.gold_label.clone().unwrap())).collect();
    let cfg = TrainConfig { feature_dim: 1 << 12, epochs: 10, ..TrainConfig::default() };
    let model: BabyModel<f64> = train_baby(&examples, &cfg, "fixture").unwrap();
    let model_dir = dir.join("baby");
    model.save(&model_dir).unwrap();
    ClassificationFixture { docs: docs.to_vec(), mamabear: synth.mamabear, model_dir }
}

pub fn stage(id: &str, threshold: Option<f64>, unit_cost: f64, source: StageSource) -> StageConfig {
    StageConfig { id: id.into(), threshold, confidence: "max_prob".into(), unit_cost, source, gate: None }
}

pub fn topic_labels() -> Vec<String> {
    TOPICS.iter().map(|s| s.to_string()).collect()
}

pub fn descriptor(id: &str, url: &str, kind: TaskKind, labels: Vec<String>) -> BackendDescriptor {
    BackendDescriptor { backoff_ms: 1, timeout_secs: 10.0, ..BackendDescriptor::new(id, url, kind, labels) }
}

/// Baby model then mamabear, either in-process (`url = None`) or over HTTP.
pub fn classification_config(fx: &ClassificationFixture, threshold: f64, url: Option<&str>) -> CascadeConfig {
    let mama = match url {
        Some(u) => StageSource::Backend(descriptor("mamabear", u, TaskKind::Classification, topic_labels())),
        None => StageSource::Mock(fx.mamabear.clone()),
    };
    CascadeConfig {
        task: TaskKind::Classification,
        batch_size: 16,
        stages: vec![
            stage("babybear", Some(threshold), 1.0, StageSource::Model(fx.model_dir.clone())),
            stage("mamabear", None, 100.0, mama),
        ],
    }
}

pub struct EntityFixture {
    pub docs: Vec<Document>,
    pub gate: MockSpec,
    pub ner: MockSpec,
}

pub fn entity_fixture(n_sentences: usize, per_doc: usize, seed: u64) -> EntityFixture {
    let t = synthetic_tagged(n_sentences, 0.4, seed);
    let docs = tagged_documents(&t.sentences, per_doc, "ner").unwrap();
    let gate = perfect_entity_gate(&t.sentences, seed + 1).unwrap();
    let ner = MockSpec::lexicon("bert", t.lexicon.clone());
    EntityFixture { docs, gate, ner }
}

pub fn entity_config(fx: &EntityFixture, threshold: f64, url: Option<&str>) -> CascadeConfig {
    let ner = match url {
        Some(u) => StageSource::Backend(descriptor("bert", u, TaskKind::EntityRecognition, vec![])),
        None => StageSource::Mock(fx.ner.clone()),
    };
    assert_eq!(fx.gate.label_set, vec![NO_ENTITY.to_string(), WITH_ENTITY.to_string()]);
    CascadeConfig {
        task: TaskKind::EntityRecognition,
        batch_size: 8,
        stages: vec![
            stage("entitybear", Some(threshold), 1.0, StageSource::Mock(fx.gate.clone())),
            stage("bert", None, 100.0, ner),
        ],
    }
}

pub fn triage_request(docs: &[Document]) -> TriageRequest {
    TriageRequest { inputs: docs.iter().map(|d| TriageInput { id: d.id.clone(), text: d.text.clone() }).collect() }
}

/// POSTs `body` and returns status and response text.
pub fn http_post(url: &str, body: &str) -> (u16, String) {
    let agent: ureq::Agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
    let mut resp = agent.post(url).header("content-type", "application/json").send(body).unwrap();
    (resp.status().as_u16(), resp.body_mut().read_to_string().unwrap())
}

pub fn http_get(url: &str) -> (u16, String) {
    let agent: ureq::Agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
    let mut resp = agent.get(url).call().unwrap();
    (resp.status().as_u16(), resp.body_mut().read_to_string().unwrap())
}

pub fn span() -> impl Strategy<Value = EntitySpan> {
    (0usize..500, 1usize..40, "[A-Z]{1,5}").prop_map(|(s, l, t)| EntitySpan::new(s, s + l, t))
}

pub fn output() -> impl Strategy<Value = PredictOutput> {
    prop_oneof![
        prop::collection::btree_map("\\PC{0,12}", any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..6)
            .prop_map(PredictOutput::Distribution),
        prop::collection::vec(span(), 0..5).prop_map(PredictOutput::Entities),
    ]
}

pub fn triage_output() -> impl Strategy<Value = TriageOutput> {
    (
        "\\PC{1,20}",
        prop::option::of("\\PC{1,10}"),
        prop::option::of(prop::collection::vec(span(), 0..4)),
        0usize..4,
        0.0f64..=1.0,
    )
        .prop_map(|(id, label, entities, answering_stage, confidence)| TriageOutput { id, label, entities, answering_stage, confidence })
}

