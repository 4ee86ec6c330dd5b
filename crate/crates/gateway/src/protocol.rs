//! JSON wire types for backends (`POST /v1/predict`) and the triage
//! service (`POST /v1/triage`).

use std::collections::BTreeMap;

use babybear_core::corpus::EntitySpan;
use babybear_core::model::{LabelDistribution, Prediction, PredictorError, TaskKind};
use serde::{Deserialize, Serialize};

pub const PREDICT_PATH: &str = "/v1/predict";
pub const TRIAGE_PATH: &str = "/v1/triage";
pub const HEALTH_PATH: &str = "/v1/health";
pub const CONFIG_PATH: &str = "/v1/config";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictRequest {
    pub inputs: Vec<String>,
}

/// One backend answer: `{"distribution": {label: p}}` or `{"entities": [...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PredictOutput {
    Distribution(BTreeMap<String, f64>),
    Entities(Vec<EntitySpan>),
}

impl From<&Prediction<f64>> for PredictOutput {
    fn from(p: &Prediction<f64>) -> Self {
        match p {
            Prediction::Distribution(d) => {
                PredictOutput::Distribution(d.labels().iter().cloned().zip(d.probs().iter().copied()).collect())
            }
            Prediction::Entities(e) => PredictOutput::Entities(e.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictResponse {
    pub outputs: Vec<PredictOutput>,
}

/// Parses and checks a backend response body against the request.
///
/// Distributions are reordered to `label_set`; entity spans must lie
/// inside their input text.
pub fn decode_predict_response(
    body: &str,
    inputs: &[&str],
    kind: TaskKind,
    label_set: &[String],
) -> Result<Vec<Prediction<f64>>, PredictorError> {
    let parsed: PredictResponse =
        serde_json::from_str(body).map_err(|e| PredictorError::protocol(format!("malformed response: {e}"), body))?;
    if parsed.outputs.len() != inputs.len() {
        return Err(PredictorError::protocol(
            format!("{} outputs for {} inputs", parsed.outputs.len(), inputs.len()),
            body,
        ));
    }
    parsed
        .outputs
        .into_iter()
        .zip(inputs)
        .enumerate()
        .map(|(i, (out, text))| match (kind, out) {
            (TaskKind::Classification, PredictOutput::Distribution(map)) => {
                let dist = LabelDistribution::from_pairs(map)
                    .and_then(|d| d.reordered(label_set))
                    .map_err(|e| PredictorError::protocol(format!("output {i}: {e}"), body))?;
                Ok(Prediction::Distribution(dist))
            }
            (TaskKind::EntityRecognition, PredictOutput::Entities(spans)) => {
                let n = text.chars().count();
                if let Some(s) = spans.iter().find(|s| s.start >= s.end || s.end > n) {
                    return Err(PredictorError::protocol(
                        format!("output {i}: span {}..{} invalid for input of {n} characters", s.start, s.end),
                        body,
                    ));
                }
                Ok(Prediction::Entities(spans))
            }
            (expected, _) => Err(PredictorError::protocol(format!("output {i}: expected a {expected:?} output"), body)),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriageInput {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriageRequest {
    pub inputs: Vec<TriageInput>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageOutput {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entities: Option<Vec<EntitySpan>>,
    /// Deepest stage that produced the answer.
    pub answering_stage: usize,
    /// Confidence of the answering stage; for entity pipelines the
    /// lowest sentence-gate confidence in the document.
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageResponse {
    pub outputs: Vec<TriageOutput>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

impl ErrorBody {
    pub fn new(code: impl Into<String>, message: impl Into<String>) -> Self {
        ErrorBody { error: ErrorDetail { code: code.into(), message: message.into(), stage: None, stage_id: None } }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub name: String,
    pub version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskKind>,
    #[serde(default)]
    pub requests: u64,
    #[serde(default)]
    pub documents: u64,
    #[serde(default)]
    pub errors: u64,
}
