//! Predictor abstraction shared by every cascade stage, label
//! distributions, oracle labeling and the built-in baby model.

mod baby;
mod features;

pub use baby::{loss_and_gradient, train_baby, BabyModel, ModelManifest, TrainConfig, TrainError, MODEL_FORMAT_VERSION};
pub use features::{featurize, tokenize, FeatureSpec, SparseVector, HASH_NAME, HASH_SEED, MIN_FEATURE_DIM};

use std::collections::HashSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Document, EntitySpan};
use crate::scalar::Scalar;

/// Binary labels of the sentence-level entity gate.
pub const NO_ENTITY: &str = "no-entity";
pub const WITH_ENTITY: &str = "with-entity";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DistributionError {
    #[error("distribution has no labels")]
    Empty,
    #[error("{labels} labels but {probs} probabilities")]
    LengthMismatch { labels: usize, probs: usize },
    #[error("duplicate label {0:?}")]
    DuplicateLabel(String),
    #[error("probability of {label:?} is {value}, outside [0, 1]")]
    OutOfRange { label: String, value: f64 },
    #[error("probabilities sum to {0}, expected 1")]
    BadSum(f64),
}

/// Normalized probability mass over an ordered label set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDistribution<S>", bound = "S: Scalar")]
pub struct LabelDistribution<S> {
    labels: Vec<String>,
    probs: Vec<S>,
}

#[derive(Deserialize)]
#[serde(bound = "S: Scalar")]
struct RawDistribution<S> {
    labels: Vec<String>,
    probs: Vec<S>,
}

impl<S: Scalar> TryFrom<RawDistribution<S>> for LabelDistribution<S> {
    type Error = DistributionError;

    fn try_from(r: RawDistribution<S>) -> Result<Self, Self::Error> {
        LabelDistribution::new(r.labels, r.probs)
    }
}

impl<S: Scalar> LabelDistribution<S> {
    pub fn new(labels: Vec<String>, probs: Vec<S>) -> Result<Self, DistributionError> {
        if labels.is_empty() {
            return Err(DistributionError::Empty);
        }
        if labels.len() != probs.len() {
            return Err(DistributionError::LengthMismatch { labels: labels.len(), probs: probs.len() });
        }
        let mut seen = HashSet::new();
        for l in &labels {
            if !seen.insert(l.as_str()) {
                return Err(DistributionError::DuplicateLabel(l.clone()));
            }
        }
        for (l, &p) in labels.iter().zip(&probs) {
            if !(p >= S::zero() && p <= S::one()) {
                return Err(DistributionError::OutOfRange { label: l.clone(), value: p.as_f64() });
            }
        }
        let sum: S = probs.iter().copied().sum();
        if (sum - S::one()).abs() > S::sum_tolerance() {
            return Err(DistributionError::BadSum(sum.as_f64()));
        }
        Ok(LabelDistribution { labels, probs })
    }

    pub fn from_pairs<L: Into<String>>(pairs: impl IntoIterator<Item = (L, S)>) -> Result<Self, DistributionError> {
        let (labels, probs) = pairs.into_iter().map(|(l, p)| (l.into(), p)).unzip();
        Self::new(labels, probs)
    }

    pub fn uniform(labels: Vec<String>) -> Result<Self, DistributionError> {
        let k = S::from_count(labels.len().max(1));
        let probs = vec![S::one() / k; labels.len()];
        Self::new(labels, probs)
    }

    pub fn one_hot(labels: Vec<String>, index: usize) -> Result<Self, DistributionError> {
        let probs = (0..labels.len()).map(|i| if i == index { S::one() } else { S::zero() }).collect();
        Self::new(labels, probs)
    }

    /// Numerically stable softmax of `logits`.
    pub fn softmax(labels: Vec<String>, logits: &[S]) -> Result<Self, DistributionError> {
        Self::new(labels, softmax(logits))
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn probs(&self) -> &[S] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn prob_of(&self, label: &str) -> Option<S> {
        self.labels.iter().position(|l| l == label).map(|i| self.probs[i])
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate().skip(1) {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn argmax_label(&self) -> &str {
        &self.labels[self.argmax()]
    }

    /// Same mass, labels reordered to `order` (which must be a permutation).
    pub fn reordered(&self, order: &[String]) -> Result<Self, DistributionError> {
        if order.len() != self.labels.len() {
            return Err(DistributionError::LengthMismatch { labels: order.len(), probs: self.probs.len() });
        }
        let probs = order
            .iter()
            .map(|l| self.prob_of(l).ok_or_else(|| DistributionError::DuplicateLabel(l.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(order.to_vec(), probs)
    }
}

pub(crate) fn softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let exps: Vec<S> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: S = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Classification,
    EntityRecognition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", bound = "S: Scalar")]
pub enum Prediction<S> {
    Distribution(LabelDistribution<S>),
    Entities(Vec<EntitySpan>),
}

impl<S: Scalar> Prediction<S> {
    pub fn distribution(&self) -> Option<&LabelDistribution<S>> {
        match self {
            Prediction::Distribution(d) => Some(d),
            Prediction::Entities(_) => None,
        }
    }

    pub fn entities(&self) -> Option<&[EntitySpan]> {
        match self {
            Prediction::Entities(e) => Some(e),
            Prediction::Distribution(_) => None,
        }
    }

    pub fn kind(&self) -> TaskKind {
        match self {
            Prediction::Distribution(_) => TaskKind::Classification,
            Prediction::Entities(_) => TaskKind::EntityRecognition,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PredictorError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { message: String, attempts: u32 },
    #[error("protocol violation: {message} (payload: {excerpt})")]
    Protocol { message: String, excerpt: String },
    #[error("predictor failed: {0}")]
    Failed(String),
}

impl PredictorError {
    pub fn protocol(message: impl Into<String>, payload: &str) -> Self {
        PredictorError::Protocol { message: message.into(), excerpt: excerpt(payload, 200) }
    }
}

/// At most `max` characters of `payload`, marked when truncated.
pub fn excerpt(payload: &str, max: usize) -> String {
    let mut out: String = payload.chars().take(max).collect();
    if payload.chars().nth(max).is_some() {
        out.push('…');
    }
    out
}

/// A stage in a cascade: a classifier returning label distributions or an
/// entity recognizer returning spans.
///
/// Implementations must tolerate concurrent calls.
pub trait Predictor<S: Scalar>: Send + Sync {
    fn id(&self) -> &str;

    fn kind(&self) -> TaskKind;

    /// Ordered labels of a classifier; empty for entity recognizers.
    fn label_set(&self) -> &[String];

    /// One prediction per text, in input order.
    fn predict_batch(&self, texts: &[&str]) -> Result<Vec<Prediction<S>>, PredictorError>;

    fn predict(&self, text: &str) -> Result<Prediction<S>, PredictorError> {
        let mut out = self.predict_batch(&[text])?;
        match out.len() {
            1 => Ok(out.remove(0)),
            n => Err(PredictorError::Failed(format!("{} returned {n} predictions for 1 input", self.id()))),
        }
    }
}

impl<S: Scalar, P: Predictor<S> + ?Sized> Predictor<S> for Arc<P> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn kind(&self) -> TaskKind {
        (**self).kind()
    }
    fn label_set(&self) -> &[String] {
        (**self).label_set()
    }
    fn predict_batch(&self, texts: &[&str]) -> Result<Vec<Prediction<S>>, PredictorError> {
        (**self).predict_batch(texts)
    }
}

/// Checks that a response matches the predictor's declared contract.
fn check_response<S: Scalar>(predictor: &dyn Predictor<S>, sent: usize, got: &[Prediction<S>]) -> Result<(), PredictorError> {
    if got.len() != sent {
        return Err(PredictorError::Failed(format!(
            "{} returned {} predictions for {sent} inputs",
            predictor.id(),
            got.len()
        )));
    }
    for p in got {
        if p.kind() != predictor.kind() {
            return Err(PredictorError::Failed(format!("{} returned a {:?} prediction", predictor.id(), p.kind())));
        }
        if let Prediction::Distribution(d) = p {
            if d.labels() != predictor.label_set() {
                return Err(PredictorError::Failed(format!(
                    "{} returned labels {:?}, declared {:?}",
                    predictor.id(),
                    d.labels(),
                    predictor.label_set()
                )));
            }
        }
    }
    Ok(())
}

/// Runs `predictor` over `texts` in chunks of `batch_size`.
///
/// When a chunk fails, its items are retried one at a time so the error
/// names the first failing input index.
pub fn predict_all<S: Scalar>(
    predictor: &dyn Predictor<S>,
    texts: &[&str],
    batch_size: usize,
) -> Result<Vec<Prediction<S>>, (usize, PredictorError)> {
    let mut out = Vec::with_capacity(texts.len());
    for (c, chunk) in texts.chunks(batch_size.max(1)).enumerate() {
        let base = c * batch_size.max(1);
        match predictor.predict_batch(chunk).and_then(|r| check_response(predictor, chunk.len(), &r).map(|_| r)) {
            Ok(preds) => out.extend(preds),
            Err(_) => {
                for (i, text) in chunk.iter().enumerate() {
                    let single = predictor
                        .predict_batch(&[text])
                        .and_then(|r| check_response(predictor, 1, &r).map(|_| r))
                        .map_err(|e| (base + i, e))?;
                    out.extend(single);
                }
                // every item succeeded alone: the batch failure was transient
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Error)]
#[error("oracle labeling failed on document {doc_id:?}: {source}")]
pub struct OracleError {
    pub doc_id: String,
    #[source]
    pub source: PredictorError,
}

/// Labels documents with the backend's predictions: argmax for classifiers,
/// [`WITH_ENTITY`]/[`NO_ENTITY`] for entity recognizers.
pub fn oracle_label<S: Scalar>(
    backend: &dyn Predictor<S>,
    docs: &[Document],
    batch_size: usize,
) -> Result<Vec<(String, String)>, OracleError> {
    let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
    let preds = predict_all(backend, &texts, batch_size)
        .map_err(|(i, source)| OracleError { doc_id: docs[i].id.clone(), source })?;
    Ok(docs
        .iter()
        .zip(preds)
        .map(|(d, p)| {
            let label = match p {
                Prediction::Distribution(dist) => dist.argmax_label().to_string(),
                Prediction::Entities(spans) if spans.is_empty() => NO_ENTITY.to_string(),
                Prediction::Entities(_) => WITH_ENTITY.to_string(),
            };
            (d.id.clone(), label)
        })
        .collect())
}
