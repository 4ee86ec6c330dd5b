//! Remote predictors reached over HTTP.

use std::sync::atomic::{AtomicU64, Ordering};
use std::thread;
use std::time::Duration;

use babybear_core::model::{Prediction, Predictor, PredictorError, TaskKind};
use serde::{Deserialize, Serialize};

use crate::protocol::{decode_predict_response, PredictRequest, PREDICT_PATH};

fn default_timeout() -> f64 {
    30.0
}

fn default_retries() -> u32 {
    2
}

fn default_backoff_ms() -> u64 {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendDescriptor {
    pub id: String,
    /// Base URL; requests go to `{endpoint}/v1/predict`.
    pub endpoint: String,
    pub kind: TaskKind,
    #[serde(default)]
    pub label_set: Vec<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    /// First retry delay; doubles on every further retry.
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
}

impl BackendDescriptor {
    pub fn new(id: impl Into<String>, endpoint: impl Into<String>, kind: TaskKind, label_set: Vec<String>) -> Self {
        BackendDescriptor {
            id: id.into(),
            endpoint: endpoint.into(),
            kind,
            label_set,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            backoff_ms: default_backoff_ms(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(format!("backend {}: timeout must be positive", self.id));
        }
        if !(self.endpoint.starts_with("http://") || self.endpoint.starts_with("https://")) {
            return Err(format!("backend {}: endpoint {:?} is not an http(s) URL", self.id, self.endpoint));
        }
        match self.kind {
            TaskKind::Classification if self.label_set.len() < 2 => {
                Err(format!("backend {}: a classifier needs at least 2 labels", self.id))
            }
            TaskKind::EntityRecognition if !self.label_set.is_empty() => {
                Err(format!("backend {}: entity recognizers take no label_set", self.id))
            }
            _ => Ok(()),
        }
    }

    pub fn url(&self) -> String {
        format!("{}{PREDICT_PATH}", self.endpoint.trim_end_matches('/'))
    }
}

/// Blocking client for one backend.
///
/// Transport failures and 5xx responses are retried with exponential
/// backoff; malformed responses and 4xx are returned at once.
pub struct HttpBackend {
    descriptor: BackendDescriptor,
    agent: ureq::Agent,
    retries: AtomicU64,
    requests: AtomicU64,
}

enum Attempt {
    Retryable(String),
    Fatal(PredictorError),
}

impl HttpBackend {
    pub fn new(descriptor: BackendDescriptor) -> Result<Self, String> {
        descriptor.validate()?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(descriptor.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(HttpBackend { descriptor, agent, retries: AtomicU64::new(0), requests: AtomicU64::new(0) })
    }

    pub fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    /// Retries performed so far, over all calls.
    pub fn retries(&self) -> u64 {
        self.retries.load(Ordering::Relaxed)
    }

    /// HTTP requests sent so far, retries included.
    pub fn requests(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }

    fn attempt(&self, body: &str, texts: &[&str]) -> Result<Vec<Prediction<f64>>, Attempt> {
        self.requests.fetch_add(1, Ordering::Relaxed);
        let mut resp = self
            .agent
            .post(self.descriptor.url())
            .header("content-type", "application/json")
            .send(body)
            .map_err(|e| Attempt::Retryable(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| Attempt::Retryable(e.to_string()))?;
        match status {
            200..=299 => decode_predict_response(&text, texts, self.descriptor.kind, &self.descriptor.label_set)
                .map_err(Attempt::Fatal),
            500..=599 => Err(Attempt::Retryable(format!("HTTP {status}"))),
            _ => Err(Attempt::Fatal(PredictorError::protocol(format!("HTTP {status}"), &text))),
        }
    }
}

impl Predictor<f64> for HttpBackend {
    fn id(&self) -> &str {
        &self.descriptor.id
    }

    fn kind(&self) -> TaskKind {
        self.descriptor.kind
    }

    fn label_set(&self) -> &[String] {
        &self.descriptor.label_set
    }

    fn predict_batch(&self, texts: &[&str]) -> Result<Vec<Prediction<f64>>, PredictorError> {
        let body = serde_json::to_string(&PredictRequest { inputs: texts.iter().map(|t| t.to_string()).collect() })
            .expect("request serializes");
        let mut delay = Duration::from_millis(self.descriptor.backoff_ms);
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(&body, texts) {
                Ok(preds) => return Ok(preds),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retryable(message)) => {
                    if attempts > self.descriptor.max_retries {
                        return Err(PredictorError::Transport { message, attempts });
                    }
                    self.retries.fetch_add(1, Ordering::Relaxed);
                    thread::sleep(delay);
                    delay *= 2;
                }
            }
        }
    }
}
