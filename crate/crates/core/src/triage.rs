//! Cascade execution: each document is answered by the first stage whose
//! confidence strictly exceeds its threshold; the final stage always answers.

use std::collections::HashSet;
use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accounting::LatencyStats;
use crate::confidence::ConfidenceFn;
use crate::corpus::Document;
use crate::model::{predict_all, Prediction, Predictor, PredictorError, TaskKind};
use crate::scalar::Scalar;

pub const DEFAULT_BATCH_SIZE: usize = 32;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("a cascade needs at least 2 stages, got {0}")]
    TooFewStages(usize),
    #[error("stage {0} is not final and needs a threshold")]
    MissingThreshold(usize),
    #[error("the final stage always answers and takes no threshold")]
    FinalThreshold,
    #[error("stage {stage} threshold {value} outside [0, 1]")]
    ThresholdRange { stage: usize, value: f64 },
    #[error("stage {stage} unit cost {value} is negative or not finite")]
    BadCost { stage: usize, value: f64 },
    #[error("unit cost must strictly increase along the cascade (stage {0})")]
    CostNotIncreasing(usize),
    #[error(transparent)]
    UnknownConfidence(#[from] crate::confidence::UnknownConfidenceFn),
    #[error("duplicate stage id {0:?}")]
    DuplicateId(String),
    #[error("stage {stage} ({id}) is a {found:?} predictor, expected {expected:?}")]
    KindMismatch { stage: usize, id: String, found: TaskKind, expected: TaskKind },
    #[error("stage {stage} labels {found:?} differ from stage 0 labels {expected:?}")]
    LabelMismatch { stage: usize, expected: Vec<String>, found: Vec<String> },
    #[error("stage {0} has a gate, which only entity pipelines use")]
    UnexpectedGate(usize),
    #[error("{0}")]
    Invalid(String),
}

fn default_confidence() -> String {
    ConfidenceFn::default().name().to_string()
}

fn default_batch_size() -> usize {
    DEFAULT_BATCH_SIZE
}

/// Serializable description of one stage, without the predictor itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct StageSettings<S> {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<S>,
    #[serde(default = "default_confidence")]
    pub confidence: String,
    pub unit_cost: S,
}

/// Serializable description of a cascade; validated identically whether
/// it is built in-process or loaded by the service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct CascadeSettings<S> {
    pub task: TaskKind,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub stages: Vec<StageSettings<S>>,
}

impl<S: Scalar> CascadeSettings<S> {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let n = self.stages.len();
        if n < 2 {
            return Err(ConfigError::TooFewStages(n));
        }
        if self.batch_size == 0 {
            return Err(ConfigError::Invalid("batch_size must be positive".into()));
        }
        let mut ids = HashSet::new();
        for (i, st) in self.stages.iter().enumerate() {
            if !ids.insert(st.id.as_str()) {
                return Err(ConfigError::DuplicateId(st.id.clone()));
            }
            st.confidence.parse::<ConfidenceFn>()?;
            match (i + 1 == n, st.threshold) {
                (true, Some(_)) => return Err(ConfigError::FinalThreshold),
                (false, None) => return Err(ConfigError::MissingThreshold(i)),
                (false, Some(t)) if !(t >= S::zero() && t <= S::one()) => {
                    return Err(ConfigError::ThresholdRange { stage: i, value: t.as_f64() })
                }
                _ => {}
            }
            if !(st.unit_cost >= S::zero() && st.unit_cost.is_finite()) {
                return Err(ConfigError::BadCost { stage: i, value: st.unit_cost.as_f64() });
            }
            if i > 0 && st.unit_cost <= self.stages[i - 1].unit_cost {
                return Err(ConfigError::CostNotIncreasing(i));
            }
        }
        Ok(())
    }
}

#[derive(Clone)]
pub struct CascadeStage<S> {
    pub predictor: Arc<dyn Predictor<S>>,
    /// `None` exactly for the final stage.
    pub threshold: Option<S>,
    pub confidence: ConfidenceFn,
    /// Cost units per input character.
    pub unit_cost: S,
}

impl<S: Scalar> CascadeStage<S> {
    pub fn new(predictor: Arc<dyn Predictor<S>>, threshold: Option<S>, confidence: ConfidenceFn, unit_cost: S) -> Self {
        CascadeStage { predictor, threshold, confidence, unit_cost }
    }

    pub fn settings(&self) -> StageSettings<S> {
        StageSettings {
            id: self.predictor.id().to_string(),
            threshold: self.threshold,
            confidence: self.confidence.name().to_string(),
            unit_cost: self.unit_cost,
        }
    }

    /// Strict `confidence > threshold`; the final stage always accepts.
    pub fn accepts(&self, confidence: S) -> bool {
        self.threshold.is_none_or(|t| confidence > t)
    }
}

impl<S: Scalar> fmt::Debug for CascadeStage<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CascadeStage")
            .field("predictor", &self.predictor.id())
            .field("threshold", &self.threshold)
            .field("confidence", &self.confidence)
            .field("unit_cost", &self.unit_cost)
            .finish()
    }
}

/// Validated classification cascade.
#[derive(Clone)]
pub struct Cascade<S> {
    stages: Vec<CascadeStage<S>>,
    batch_size: usize,
}

impl<S: Scalar> fmt::Debug for Cascade<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Cascade").field("stages", &self.stages).field("batch_size", &self.batch_size).finish()
    }
}

impl<S: Scalar> Cascade<S> {
    pub fn new(stages: Vec<CascadeStage<S>>) -> Result<Self, ConfigError> {
        Self::with_batch_size(stages, DEFAULT_BATCH_SIZE)
    }

    pub fn with_batch_size(stages: Vec<CascadeStage<S>>, batch_size: usize) -> Result<Self, ConfigError> {
        let cascade = Cascade { stages, batch_size };
        cascade.settings().validate()?;
        let labels = cascade.stages[0].predictor.label_set();
        for (i, st) in cascade.stages.iter().enumerate() {
            let kind = st.predictor.kind();
            if kind != TaskKind::Classification {
                return Err(ConfigError::KindMismatch {
                    stage: i,
                    id: st.predictor.id().into(),
                    found: kind,
                    expected: TaskKind::Classification,
                });
            }
            // order may differ between stages; answers are compared by label name
            let same = |a: &[String], b: &[String]| a.iter().collect::<HashSet<_>>() == b.iter().collect::<HashSet<_>>();
            if st.predictor.label_set().len() != labels.len() || !same(st.predictor.label_set(), labels) {
                return Err(ConfigError::LabelMismatch {
                    stage: i,
                    expected: labels.to_vec(),
                    found: st.predictor.label_set().to_vec(),
                });
            }
        }
        Ok(cascade)
    }

    pub fn settings(&self) -> CascadeSettings<S> {
        CascadeSettings {
            task: TaskKind::Classification,
            batch_size: self.batch_size,
            stages: self.stages.iter().map(CascadeStage::settings).collect(),
        }
    }

    pub fn stages(&self) -> &[CascadeStage<S>] {
        &self.stages
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn label_set(&self) -> &[String] {
        self.stages[0].predictor.label_set()
    }

    pub fn unit_costs(&self) -> Vec<S> {
        self.stages.iter().map(|s| s.unit_cost).collect()
    }

    /// Thresholds of the non-final stages.
    pub fn thresholds(&self) -> Vec<S> {
        self.stages.iter().filter_map(|s| s.threshold).collect()
    }

    /// Copy with the threshold of non-final `stage` replaced.
    pub fn with_threshold(&self, stage: usize, threshold: S) -> Result<Self, ConfigError> {
        if stage + 1 >= self.stages.len() {
            return Err(ConfigError::FinalThreshold);
        }
        let mut next = self.clone();
        next.stages[stage].threshold = Some(threshold);
        next.settings().validate()?;
        Ok(next)
    }
}

/// Per-document result of triage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct TriageOutcome<S> {
    pub doc_id: String,
    pub answering_stage: usize,
    /// Whether the answering stage is the last one in the cascade.
    pub answered_by_final: bool,
    pub prediction: Prediction<S>,
    /// Confidence at every visited stage, in order.
    pub confidences: Vec<S>,
    /// Sum over visited stages of `unit_cost * chars`.
    pub cost: S,
    /// Length of the document in characters.
    pub chars: usize,
}

impl<S: Scalar> TriageOutcome<S> {
    pub fn label(&self) -> Option<&str> {
        self.prediction.distribution().map(|d| d.argmax_label())
    }

    /// Confidence of the stage that answered.
    pub fn confidence(&self) -> S {
        self.confidences[self.answering_stage]
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TriageError {
    #[error("stage {stage} ({stage_id}) failed on document {doc_id:?}: {source}")]
    Backend {
        stage: usize,
        stage_id: String,
        doc_id: String,
        #[source]
        source: PredictorError,
    },
    #[error("document {0:?} has empty text")]
    EmptyDocument(String),
    #[error("stage {stage} returned a non-distribution prediction for document {doc_id:?}")]
    NotADistribution { stage: usize, doc_id: String },
}

fn confidence_of<S: Scalar>(stage: usize, st: &CascadeStage<S>, doc_id: &str, p: &Prediction<S>) -> Result<S, TriageError> {
    p.distribution()
        .map(|d| st.confidence.apply(d))
        .ok_or_else(|| TriageError::NotADistribution { stage, doc_id: doc_id.into() })
}

/// Runs one document through the cascade.
pub fn triage_one<S: Scalar>(cascade: &Cascade<S>, doc: &Document) -> Result<TriageOutcome<S>, TriageError> {
    if doc.text.is_empty() {
        return Err(TriageError::EmptyDocument(doc.id.clone()));
    }
    let chars = doc.char_len();
    let mut confidences = Vec::new();
    let mut cost = S::zero();
    let last = cascade.len() - 1;
    for (i, st) in cascade.stages.iter().enumerate() {
        let prediction = st.predictor.predict(&doc.text).map_err(|source| TriageError::Backend {
            stage: i,
            stage_id: st.predictor.id().into(),
            doc_id: doc.id.clone(),
            source,
        })?;
        let conf = confidence_of(i, st, &doc.id, &prediction)?;
        confidences.push(conf);
        cost = cost + st.unit_cost * S::from_count(chars);
        if st.accepts(conf) {
            return Ok(TriageOutcome {
                doc_id: doc.id.clone(),
                answering_stage: i,
                answered_by_final: i == last,
                prediction,
                confidences,
                cost,
                chars,
            });
        }
    }
    unreachable!("final stage always answers")
}

/// Stage-batched triage; outcomes in input order and identical to mapping
/// [`triage_one`] over `docs`.
pub fn triage_batch<S: Scalar>(cascade: &Cascade<S>, docs: &[Document]) -> Result<Vec<TriageOutcome<S>>, TriageError> {
    triage_batch_timed(cascade, docs).map(|(outcomes, _)| outcomes)
}

/// [`triage_batch`] plus wall-clock statistics of every backend call, per stage.
pub fn triage_batch_timed<S: Scalar>(
    cascade: &Cascade<S>,
    docs: &[Document],
) -> Result<(Vec<TriageOutcome<S>>, Vec<LatencyStats>), TriageError> {
    if let Some(d) = docs.iter().find(|d| d.text.is_empty()) {
        return Err(TriageError::EmptyDocument(d.id.clone()));
    }
    let chars: Vec<usize> = docs.iter().map(Document::char_len).collect();
    let mut confidences: Vec<Vec<S>> = vec![Vec::new(); docs.len()];
    let mut costs = vec![S::zero(); docs.len()];
    let mut done: Vec<Option<(usize, Prediction<S>)>> = vec![None; docs.len()];
    let mut pending: Vec<usize> = (0..docs.len()).collect();
    let mut timings = Vec::with_capacity(cascade.len());
    let last = cascade.len() - 1;

    for (i, st) in cascade.stages.iter().enumerate() {
        let mut samples: Vec<Duration> = Vec::new();
        let mut still = Vec::new();
        for chunk in pending.chunks(cascade.batch_size) {
            let texts: Vec<&str> = chunk.iter().map(|&d| docs[d].text.as_str()).collect();
            let started = Instant::now();
            let preds = predict_all(st.predictor.as_ref(), &texts, cascade.batch_size).map_err(|(k, source)| {
                TriageError::Backend { stage: i, stage_id: st.predictor.id().into(), doc_id: docs[chunk[k]].id.clone(), source }
            })?;
            samples.push(started.elapsed());
            for (&d, pred) in chunk.iter().zip(preds) {
                let conf = confidence_of(i, st, &docs[d].id, &pred)?;
                confidences[d].push(conf);
                costs[d] = costs[d] + st.unit_cost * S::from_count(chars[d]);
                if st.accepts(conf) {
                    done[d] = Some((i, pred));
                } else {
                    still.push(d);
                }
            }
        }
        timings.push(LatencyStats::from_samples(&samples));
        pending = still;
    }

    let outcomes = docs
        .iter()
        .zip(done)
        .zip(confidences.into_iter().zip(costs))
        .zip(chars)
        .map(|(((doc, answered), (confidences, cost)), chars)| {
            let (stage, prediction) = answered.expect("final stage always answers");
            TriageOutcome {
                doc_id: doc.id.clone(),
                answering_stage: stage,
                answered_by_final: stage == last,
                prediction,
                confidences,
                cost,
                chars,
            }
        })
        .collect();
    Ok((outcomes, timings))
}

/// Every stage's prediction and confidence for every document, computed
/// once so routing can be replayed under any thresholds.
#[derive(Debug, Clone)]
pub struct PredictionTable<S> {
    doc_ids: Vec<String>,
    chars: Vec<usize>,
    /// `[stage][doc]`
    predictions: Vec<Vec<Prediction<S>>>,
    /// `[stage][doc]`
    confidences: Vec<Vec<S>>,
    unit_costs: Vec<S>,
}

impl<S: Scalar> PredictionTable<S> {
    pub fn compute(cascade: &Cascade<S>, docs: &[Document]) -> Result<Self, TriageError> {
        if let Some(d) = docs.iter().find(|d| d.text.is_empty()) {
            return Err(TriageError::EmptyDocument(d.id.clone()));
        }
        let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
        let mut predictions = Vec::with_capacity(cascade.len());
        let mut confidences = Vec::with_capacity(cascade.len());
        for (i, st) in cascade.stages.iter().enumerate() {
            let preds = predict_all(st.predictor.as_ref(), &texts, cascade.batch_size).map_err(|(k, source)| {
                TriageError::Backend { stage: i, stage_id: st.predictor.id().into(), doc_id: docs[k].id.clone(), source }
            })?;
            let confs = preds
                .iter()
                .zip(docs)
                .map(|(p, d)| confidence_of(i, st, &d.id, p))
                .collect::<Result<Vec<_>, _>>()?;
            predictions.push(preds);
            confidences.push(confs);
        }
        Ok(PredictionTable {
            doc_ids: docs.iter().map(|d| d.id.clone()).collect(),
            chars: docs.iter().map(Document::char_len).collect(),
            predictions,
            confidences,
            unit_costs: cascade.unit_costs(),
        })
    }

    pub fn n_docs(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn n_stages(&self) -> usize {
        self.predictions.len()
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn prediction(&self, stage: usize, doc: usize) -> &Prediction<S> {
        &self.predictions[stage][doc]
    }

    pub fn confidence(&self, stage: usize, doc: usize) -> S {
        self.confidences[stage][doc]
    }

    /// Answering stage of `doc` under `thresholds` (one per non-final stage).
    pub fn route(&self, thresholds: &[S], doc: usize) -> usize {
        thresholds
            .iter()
            .enumerate()
            .find(|&(stage, &t)| self.confidences[stage][doc] > t)
            .map_or(self.n_stages() - 1, |(stage, _)| stage)
    }

    /// Outcomes that [`triage_batch`] would produce under `thresholds`.
    pub fn replay(&self, thresholds: &[S]) -> Vec<TriageOutcome<S>> {
        assert_eq!(thresholds.len() + 1, self.n_stages(), "one threshold per non-final stage");
        (0..self.n_docs())
            .map(|d| {
                let stage = self.route(thresholds, d);
                let cost = (0..=stage).fold(S::zero(), |acc, s| acc + self.unit_costs[s] * S::from_count(self.chars[d]));
                TriageOutcome {
                    doc_id: self.doc_ids[d].clone(),
                    answering_stage: stage,
                    answered_by_final: stage + 1 == self.n_stages(),
                    prediction: self.predictions[stage][d].clone(),
                    confidences: (0..=stage).map(|s| self.confidences[s][d]).collect(),
                    cost,
                    chars: self.chars[d],
                }
            })
            .collect()
    }
}
