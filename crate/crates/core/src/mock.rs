//! Deterministic in-process predictors for tests and demos.
//!
//! [`MockSpec`] is also the file format served by the gateway's
//! mock backend, so the same spec drives in-process and HTTP runs.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use xxhash_rust::xxh64::xxh64;

use crate::corpus::EntitySpan;
use crate::model::{LabelDistribution, Prediction, Predictor, PredictorError, TaskKind};
use crate::scalar::Scalar;

/// Lookup key of a text in a mock table: xxh64 (seed 0) as 16 hex digits.
pub fn text_key(text: &str) -> String {
    format!("{:016x}", xxh64(text.as_bytes(), 0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockResponse {
    Distribution(LabelDistribution<f64>),
    Entities(Vec<EntitySpan>),
    /// Spans of every whole-token occurrence of a lexicon term.
    Lexicon,
    Fail(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockSpec {
    pub id: String,
    pub kind: TaskKind,
    #[serde(default)]
    pub label_set: Vec<String>,
    /// [`text_key`] → response.
    #[serde(default)]
    pub table: BTreeMap<String, MockResponse>,
    pub default: MockResponse,
    /// Term (one or more space-separated tokens) → entity type.
    #[serde(default)]
    pub entity_lexicon: BTreeMap<String, String>,
    #[serde(default)]
    pub latency_ms: u64,
    /// The first `fail_first` calls fail as transport errors.
    #[serde(default)]
    pub fail_first: usize,
}

impl MockSpec {
    pub fn classification(id: impl Into<String>, label_set: Vec<String>, default: MockResponse) -> Self {
        MockSpec {
            id: id.into(),
            kind: TaskKind::Classification,
            label_set,
            table: BTreeMap::new(),
            default,
            entity_lexicon: BTreeMap::new(),
            latency_ms: 0,
            fail_first: 0,
        }
    }

    pub fn entities(id: impl Into<String>, default: MockResponse) -> Self {
        MockSpec { kind: TaskKind::EntityRecognition, ..Self::classification(id, Vec::new(), default) }
    }

    pub fn lexicon(id: impl Into<String>, lexicon: impl IntoIterator<Item = (String, String)>) -> Self {
        MockSpec { entity_lexicon: lexicon.into_iter().collect(), ..Self::entities(id, MockResponse::Lexicon) }
    }

    pub fn insert_text(&mut self, text: &str, response: MockResponse) {
        self.table.insert(text_key(text), response);
    }

    pub fn validate(&self) -> Result<(), String> {
        let responses = self.table.values().chain(std::iter::once(&self.default));
        for r in responses {
            match (self.kind, r) {
                (TaskKind::Classification, MockResponse::Distribution(d)) => {
                    if d.labels() != self.label_set.as_slice() {
                        return Err(format!("mock {} serves labels {:?}, declared {:?}", self.id, d.labels(), self.label_set));
                    }
                }
                (TaskKind::EntityRecognition, MockResponse::Entities(_) | MockResponse::Lexicon) => {}
                (_, MockResponse::Fail(_)) => {}
                (kind, other) => return Err(format!("mock {}: {other:?} is not a {kind:?} response", self.id)),
            }
        }
        Ok(())
    }

    fn lexicon_spans(&self, text: &str) -> Vec<EntitySpan> {
        let mut tokens = Vec::new();
        let mut start = None;
        for (i, c) in text.chars().chain(std::iter::once(' ')).enumerate() {
            match (c.is_whitespace(), start) {
                (false, None) => start = Some(i),
                (true, Some(s)) => {
                    tokens.push((s, i));
                    start = None;
                }
                _ => {}
            }
        }
        let chars: Vec<char> = text.chars().collect();
        let word = |(s, e): (usize, usize)| chars[s..e].iter().collect::<String>();
        let terms: Vec<(Vec<&str>, &String)> =
            self.entity_lexicon.iter().map(|(t, ty)| (t.split_whitespace().collect(), ty)).collect();
        let mut spans = Vec::new();
        let mut i = 0;
        'outer: while i < tokens.len() {
            // longest match first
            let mut best: Option<(usize, &String)> = None;
            for (parts, ty) in &terms {
                let n = parts.len();
                if n > 0 && i + n <= tokens.len() && parts.iter().enumerate().all(|(k, p)| word(tokens[i + k]) == *p) && best.is_none_or(|(m, _)| n > m) {
                    best = Some((n, ty));
                }
            }
            if let Some((n, ty)) = best {
                spans.push(EntitySpan::new(tokens[i].0, tokens[i + n - 1].1, ty.clone()));
                i += n;
                continue 'outer;
            }
            i += 1;
        }
        spans
    }

    /// Resolves the response for one text without side effects.
    pub fn respond(&self, text: &str) -> Result<Prediction<f64>, PredictorError> {
        let response = self.table.get(&text_key(text)).unwrap_or(&self.default);
        match response {
            MockResponse::Distribution(d) => Ok(Prediction::Distribution(d.clone())),
            MockResponse::Entities(e) => Ok(Prediction::Entities(e.clone())),
            MockResponse::Lexicon => Ok(Prediction::Entities(self.lexicon_spans(text))),
            MockResponse::Fail(msg) => Err(PredictorError::Failed(msg.clone())),
        }
    }
}

/// Converts a mock (double precision) prediction to scalar `S`.
pub fn cast_prediction<S: Scalar>(p: Prediction<f64>) -> Result<Prediction<S>, PredictorError> {
    match p {
        Prediction::Entities(e) => Ok(Prediction::Entities(e)),
        Prediction::Distribution(d) => {
            let probs = d.probs().iter().map(|&p| S::lit(p)).collect();
            LabelDistribution::new(d.labels().to_vec(), probs)
                .map(Prediction::Distribution)
                .map_err(|e| PredictorError::Failed(e.to_string()))
        }
    }
}

/// In-process predictor backed by a [`MockSpec`]; records every call.
#[derive(Debug)]
pub struct MockPredictor<S> {
    spec: MockSpec,
    calls: AtomicUsize,
    seen: Mutex<Vec<String>>,
    _scalar: std::marker::PhantomData<fn() -> S>,
}

impl<S: Scalar> MockPredictor<S> {
    pub fn new(spec: MockSpec) -> Self {
        MockPredictor { spec, calls: AtomicUsize::new(0), seen: Mutex::new(Vec::new()), _scalar: Default::default() }
    }

    pub fn spec(&self) -> &MockSpec {
        &self.spec
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Every text received, in arrival order.
    pub fn inputs_seen(&self) -> Vec<String> {
        self.seen.lock().expect("mock log").clone()
    }
}

impl<S: Scalar> Predictor<S> for MockPredictor<S> {
    fn id(&self) -> &str {
        &self.spec.id
    }

    fn kind(&self) -> TaskKind {
        self.spec.kind
    }

    fn label_set(&self) -> &[String] {
        &self.spec.label_set
    }

    fn predict_batch(&self, texts: &[&str]) -> Result<Vec<Prediction<S>>, PredictorError> {
        let call = self.calls.fetch_add(1, Ordering::SeqCst);
        if self.spec.latency_ms > 0 {
            thread::sleep(Duration::from_millis(self.spec.latency_ms));
        }
        if call < self.spec.fail_first {
            return Err(PredictorError::Transport { message: format!("injected failure {}", call + 1), attempts: 1 });
        }
        self.seen.lock().expect("mock log").extend(texts.iter().map(|t| t.to_string()));
        texts.iter().map(|t| self.spec.respond(t).and_then(cast_prediction)).collect()
    }
}

type ClassifyFn<S> = dyn Fn(&str) -> Result<LabelDistribution<S>, PredictorError> + Send + Sync;
type RecognizeFn = dyn Fn(&str) -> Result<Vec<EntitySpan>, PredictorError> + Send + Sync;

enum Script<S> {
    Classify(Box<ClassifyFn<S>>),
    Recognize(Box<RecognizeFn>),
}

/// Predictor answering from a closure; handy for scripted routing tests.
pub struct FnPredictor<S> {
    id: String,
    labels: Vec<String>,
    script: Script<S>,
    calls: AtomicUsize,
}

impl<S: Scalar> FnPredictor<S> {
    pub fn classifier(
        id: impl Into<String>,
        labels: Vec<String>,
        f: impl Fn(&str) -> Result<LabelDistribution<S>, PredictorError> + Send + Sync + 'static,
    ) -> Self {
        FnPredictor { id: id.into(), labels, script: Script::Classify(Box::new(f)), calls: AtomicUsize::new(0) }
    }

    pub fn recognizer(
        id: impl Into<String>,
        f: impl Fn(&str) -> Result<Vec<EntitySpan>, PredictorError> + Send + Sync + 'static,
    ) -> Self {
        FnPredictor { id: id.into(), labels: Vec::new(), script: Script::Recognize(Box::new(f)), calls: AtomicUsize::new(0) }
    }

    /// Number of `predict_batch` invocations.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<S: Scalar> Predictor<S> for FnPredictor<S> {
    fn id(&self) -> &str {
        &self.id
    }

    fn kind(&self) -> TaskKind {
        match self.script {
            Script::Classify(_) => TaskKind::Classification,
            Script::Recognize(_) => TaskKind::EntityRecognition,
        }
    }

    fn label_set(&self) -> &[String] {
        &self.labels
    }

    fn predict_batch(&self, texts: &[&str]) -> Result<Vec<Prediction<S>>, PredictorError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        texts
            .iter()
            .map(|t| match &self.script {
                Script::Classify(f) => f(t).map(Prediction::Distribution),
                Script::Recognize(f) => f(t).map(Prediction::Entities),
            })
            .collect()
    }
}
