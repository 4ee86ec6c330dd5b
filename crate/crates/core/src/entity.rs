//! Sentence-level triage for entity recognition.
//!
//! A binary gate marks sentences as `no-entity` or `with-entity`; those it
//! is confident contain no entity are skipped. The rest are joined with
//! single spaces and sent to an entity backend once per document, and the
//! returned spans are mapped back to document offsets. An optional second
//! gate splits the surviving sentences between a distilled backend and
//! the full one.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::{self, Write as _};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accounting::{make_entity_report, AccountingError, ReferenceKind};
use crate::calibrate::{find_threshold, validate_grid, CalibrateError, CalibrationResult, SweepPoint};
use crate::confidence::ConfidenceFn;
use crate::corpus::{split_sentences, tags_to_spans, CorpusError, Document, EntitySpan, TaggedSentence};
use crate::model::{predict_all, LabelDistribution, Predictor, PredictorError, TaskKind, NO_ENTITY, WITH_ENTITY};
use crate::scalar::{ratio, Scalar};
use crate::triage::DEFAULT_BATCH_SIZE;

/// Labels of the gate choosing the distilled backend: `"1"` means it is
/// expected to reproduce the reference spans exactly.
pub const DISTIL_OK: &str = "1";
pub const DISTIL_NOT_OK: &str = "0";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EntityError {
    #[error("{0}")]
    Config(String),
    #[error("document {0:?} has empty text")]
    EmptyDocument(String),
    #[error("{stage} ({stage_id}) failed on document {doc_id:?}: {source}")]
    Backend {
        stage: &'static str,
        stage_id: String,
        doc_id: String,
        #[source]
        source: PredictorError,
    },
    #[error("{stage} returned the wrong prediction kind for document {doc_id:?}")]
    WrongKind { stage: &'static str, doc_id: String },
    #[error("span {start}..{end} from the backend on document {doc_id:?} does not fit inside sentence {sentence}")]
    Remap { doc_id: String, sentence: usize, start: usize, end: usize },
}

/// A binary classifier with its acceptance threshold.
#[derive(Clone)]
pub struct GateStage<S> {
    pub predictor: Arc<dyn Predictor<S>>,
    pub threshold: S,
    pub confidence: ConfidenceFn,
    pub unit_cost: S,
}

#[derive(Clone)]
pub struct BackendStage<S> {
    pub predictor: Arc<dyn Predictor<S>>,
    pub unit_cost: S,
}

impl<S: Scalar> fmt::Debug for GateStage<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GateStage")
            .field("predictor", &self.predictor.id())
            .field("threshold", &self.threshold)
            .field("confidence", &self.confidence)
            .field("unit_cost", &self.unit_cost)
            .finish()
    }
}

impl<S: Scalar> fmt::Debug for BackendStage<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BackendStage").field("predictor", &self.predictor.id()).field("unit_cost", &self.unit_cost).finish()
    }
}

#[derive(Clone)]
pub struct DistilStage<S> {
    pub gate: GateStage<S>,
    pub backend: BackendStage<S>,
}

/// EntityBear (`distil = None`) or DistilBear.
#[derive(Clone)]
pub struct EntityPipeline<S> {
    pub entity_gate: GateStage<S>,
    pub distil: Option<DistilStage<S>>,
    pub full: BackendStage<S>,
    pub batch_size: usize,
}

impl<S: Scalar> fmt::Debug for DistilStage<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DistilStage").field("gate", &self.gate).field("backend", &self.backend).finish()
    }
}

impl<S: Scalar> fmt::Debug for EntityPipeline<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EntityPipeline")
            .field("entity_gate", &self.entity_gate)
            .field("distil", &self.distil)
            .field("full", &self.full)
            .field("batch_size", &self.batch_size)
            .finish()
    }
}

fn check_gate<S: Scalar>(name: &str, gate: &GateStage<S>, labels: [&str; 2]) -> Result<(), EntityError> {
    let p = &gate.predictor;
    if p.kind() != TaskKind::Classification {
        return Err(EntityError::Config(format!("{name} {} must be a classifier", p.id())));
    }
    let got: BTreeSet<&str> = p.label_set().iter().map(String::as_str).collect();
    if p.label_set().len() != 2 || got != labels.into_iter().collect() {
        return Err(EntityError::Config(format!("{name} {} labels {:?}, expected {labels:?}", p.id(), p.label_set())));
    }
    if !(gate.threshold >= S::zero() && gate.threshold <= S::one()) {
        return Err(EntityError::Config(format!("{name} threshold {} outside [0, 1]", gate.threshold)));
    }
    if !(gate.unit_cost >= S::zero() && gate.unit_cost.is_finite()) {
        return Err(EntityError::Config(format!("{name} unit cost must be finite and nonnegative")));
    }
    Ok(())
}

fn check_backend<S: Scalar>(name: &str, b: &BackendStage<S>) -> Result<(), EntityError> {
    if b.predictor.kind() != TaskKind::EntityRecognition {
        return Err(EntityError::Config(format!("{name} {} must be an entity recognizer", b.predictor.id())));
    }
    if !(b.unit_cost >= S::zero() && b.unit_cost.is_finite()) {
        return Err(EntityError::Config(format!("{name} unit cost must be finite and nonnegative")));
    }
    Ok(())
}

impl<S: Scalar> EntityPipeline<S> {
    pub fn entitybear(entity_gate: GateStage<S>, full: BackendStage<S>) -> Result<Self, EntityError> {
        let p = EntityPipeline { entity_gate, distil: None, full, batch_size: DEFAULT_BATCH_SIZE };
        p.validate()?;
        Ok(p)
    }

    pub fn distilbear(entity_gate: GateStage<S>, distil: DistilStage<S>, full: BackendStage<S>) -> Result<Self, EntityError> {
        let p = EntityPipeline { entity_gate, distil: Some(distil), full, batch_size: DEFAULT_BATCH_SIZE };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), EntityError> {
        if self.batch_size == 0 {
            return Err(EntityError::Config("batch_size must be positive".into()));
        }
        check_gate("entity gate", &self.entity_gate, [NO_ENTITY, WITH_ENTITY])?;
        check_backend("full backend", &self.full)?;
        if let Some(d) = &self.distil {
            check_gate("distil gate", &d.gate, [DISTIL_NOT_OK, DISTIL_OK])?;
            check_backend("distil backend", &d.backend)?;
            if d.backend.unit_cost >= self.full.unit_cost {
                return Err(EntityError::Config("distil backend must cost less than the full backend".into()));
            }
        }
        if self.entity_gate.unit_cost >= self.full.unit_cost {
            return Err(EntityError::Config("entity gate must cost less than the full backend".into()));
        }
        Ok(())
    }

    /// `[entity threshold, distil threshold]`, the second only with a distil stage.
    pub fn thresholds(&self) -> Vec<S> {
        std::iter::once(self.entity_gate.threshold).chain(self.distil.as_ref().map(|d| d.gate.threshold)).collect()
    }

    pub fn with_thresholds(&self, t_entity: S, t_distil: Option<S>) -> Result<Self, EntityError> {
        let mut next = self.clone();
        next.entity_gate.threshold = t_entity;
        if let (Some(d), Some(t)) = (next.distil.as_mut(), t_distil) {
            d.gate.threshold = t;
        }
        next.validate()?;
        Ok(next)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    Skipped,
    /// The backend of a two-stage (EntityBear) pipeline.
    Mamabear,
    Distil,
    /// The full backend of a DistilBear pipeline.
    Bert,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct SentenceVerdict<S> {
    pub index: usize,
    /// Character offset of the sentence in the document.
    pub offset: usize,
    pub chars: usize,
    pub binary_distribution: LabelDistribution<S>,
    pub confidence: S,
    /// Distil gate confidence, for sentences that reached it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distil_confidence: Option<S>,
    pub routed_to: Route,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingCounts {
    pub skipped: usize,
    pub distil: usize,
    pub full: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct NerOutcome<S> {
    pub doc_id: String,
    /// Spans in document coordinates, sorted by position.
    pub predicted: Vec<EntitySpan>,
    pub verdicts: Vec<SentenceVerdict<S>>,
    pub skipped_fraction: S,
    pub cost: S,
    pub routing: RoutingCounts,
}

/// Gate outputs for one document, reusable across thresholds.
#[derive(Debug, Clone)]
struct DocGates<S> {
    sentences: Vec<(String, usize)>,
    entity: Vec<LabelDistribution<S>>,
    /// Filled for every sentence in sweeps, only for survivors in live runs.
    distil: Vec<Option<LabelDistribution<S>>>,
}

fn gate_predictions<S: Scalar>(
    stage: &'static str,
    gate: &GateStage<S>,
    texts: &[&str],
    ids: &[&str],
    batch_size: usize,
) -> Result<Vec<LabelDistribution<S>>, EntityError> {
    let preds = predict_all(gate.predictor.as_ref(), texts, batch_size).map_err(|(i, source)| EntityError::Backend {
        stage,
        stage_id: gate.predictor.id().into(),
        doc_id: ids[i].into(),
        source,
    })?;
    preds
        .into_iter()
        .zip(ids)
        .map(|(p, id)| match p.distribution() {
            Some(d) => Ok(d.clone()),
            None => Err(EntityError::WrongKind { stage, doc_id: id.to_string() }),
        })
        .collect()
}

fn skip<S: Scalar>(gate: &GateStage<S>, d: &LabelDistribution<S>, threshold: S) -> bool {
    d.argmax_label() == NO_ENTITY && gate.confidence.apply(d) > threshold
}

fn use_distil<S: Scalar>(gate: &GateStage<S>, d: &LabelDistribution<S>, threshold: S) -> bool {
    d.argmax_label() == DISTIL_OK && gate.confidence.apply(d) > threshold
}

/// Runs the entity gate on every sentence of every document and, when
/// `distil_all` is set, the distil gate too.
fn gate_documents<S: Scalar>(pipeline: &EntityPipeline<S>, docs: &[Document], distil_all: bool) -> Result<Vec<DocGates<S>>, EntityError> {
    if let Some(d) = docs.iter().find(|d| d.text.is_empty()) {
        return Err(EntityError::EmptyDocument(d.id.clone()));
    }
    let split: Vec<Vec<(String, usize)>> = docs.iter().map(|d| split_sentences(&d.text)).collect();
    let texts: Vec<&str> = split.iter().flatten().map(|(s, _)| s.as_str()).collect();
    let ids: Vec<&str> = docs.iter().zip(&split).flat_map(|(d, s)| std::iter::repeat_n(d.id.as_str(), s.len())).collect();
    let mut entity = gate_predictions("entity gate", &pipeline.entity_gate, &texts, &ids, pipeline.batch_size)?.into_iter();
    let mut distil = match (&pipeline.distil, distil_all) {
        (Some(d), true) => Some(gate_predictions("distil gate", &d.gate, &texts, &ids, pipeline.batch_size)?.into_iter()),
        _ => None,
    };
    Ok(split
        .into_iter()
        .map(|sentences| {
            let n = sentences.len();
            DocGates {
                sentences,
                entity: entity.by_ref().take(n).collect(),
                distil: match distil.as_mut() {
                    Some(it) => it.by_ref().take(n).map(Some).collect(),
                    None => vec![None; n],
                },
            }
        })
        .collect())
}

/// Joined text and, per sentence, `(start in joined text, sentence index)`.
fn join_sentences(sentences: &[(String, usize)], members: &[usize]) -> (String, Vec<(usize, usize)>) {
    let mut joined = String::new();
    let mut segments = Vec::with_capacity(members.len());
    let mut pos = 0;
    for (k, &i) in members.iter().enumerate() {
        if k > 0 {
            joined.push(' ');
            pos += 1;
        }
        segments.push((pos, i));
        joined.push_str(&sentences[i].0);
        pos += sentences[i].0.chars().count();
    }
    (joined, segments)
}

/// Maps spans over a joined text back to document offsets.
fn remap(
    doc_id: &str,
    sentences: &[(String, usize)],
    segments: &[(usize, usize)],
    spans: &[EntitySpan],
) -> Result<Vec<EntitySpan>, EntityError> {
    spans
        .iter()
        .map(|span| {
            let k = segments.partition_point(|&(start, _)| start <= span.start);
            let fail = |sentence| EntityError::Remap { doc_id: doc_id.into(), sentence, start: span.start, end: span.end };
            if k == 0 {
                return Err(fail(segments.first().map_or(0, |s| s.1)));
            }
            let (seg_start, i) = segments[k - 1];
            let len = sentences[i].0.chars().count();
            if span.end > seg_start + len || span.end <= span.start {
                return Err(fail(i));
            }
            let offset = sentences[i].1;
            Ok(EntitySpan::new(span.start - seg_start + offset, span.end - seg_start + offset, span.etype.clone()))
        })
        .collect()
}

/// Backend call for one joined text; sweeps memoize through this.
type BackendCall<'a> = dyn FnMut(Route, &str) -> Result<Vec<EntitySpan>, EntityError> + 'a;

fn route_document<S: Scalar>(
    pipeline: &EntityPipeline<S>,
    doc_id: &str,
    gates: &DocGates<S>,
    t_entity: S,
    t_distil: S,
    call: &mut BackendCall<'_>,
) -> Result<NerOutcome<S>, EntityError> {
    let mut verdicts = Vec::with_capacity(gates.sentences.len());
    let mut cost = S::zero();
    let mut groups: BTreeMap<Route, Vec<usize>> = BTreeMap::new();
    for (i, ((text, offset), dist)) in gates.sentences.iter().zip(&gates.entity).enumerate() {
        let chars = text.chars().count();
        cost = cost + pipeline.entity_gate.unit_cost * S::from_count(chars);
        let confidence = pipeline.entity_gate.confidence.apply(dist);
        let mut distil_confidence = None;
        let routed_to = if skip(&pipeline.entity_gate, dist, t_entity) {
            Route::Skipped
        } else if let Some(d) = &pipeline.distil {
            let g = gates.distil[i].as_ref().expect("distil gate evaluated for survivors");
            cost = cost + d.gate.unit_cost * S::from_count(chars);
            distil_confidence = Some(d.gate.confidence.apply(g));
            if use_distil(&d.gate, g, t_distil) {
                Route::Distil
            } else {
                Route::Bert
            }
        } else {
            Route::Mamabear
        };
        if routed_to != Route::Skipped {
            groups.entry(routed_to).or_default().push(i);
        }
        verdicts.push(SentenceVerdict {
            index: i,
            offset: *offset,
            chars,
            binary_distribution: dist.clone(),
            confidence,
            distil_confidence,
            routed_to,
        });
    }

    let mut predicted = Vec::new();
    for (route, members) in &groups {
        let (joined, segments) = join_sentences(&gates.sentences, members);
        let unit = match route {
            Route::Distil => pipeline.distil.as_ref().expect("distil route").backend.unit_cost,
            _ => pipeline.full.unit_cost,
        };
        cost = cost + unit * S::from_count(joined.chars().count());
        let spans = call(*route, &joined)?;
        predicted.extend(remap(doc_id, &gates.sentences, &segments, &spans)?);
    }
    predicted.sort_by(|a, b| (a.start, a.end, &a.etype).cmp(&(b.start, b.end, &b.etype)));

    let count = |r: Route| verdicts.iter().filter(|v| v.routed_to == r).count();
    let routing = RoutingCounts {
        skipped: count(Route::Skipped),
        distil: count(Route::Distil),
        full: count(Route::Mamabear) + count(Route::Bert),
    };
    Ok(NerOutcome {
        doc_id: doc_id.into(),
        predicted,
        skipped_fraction: ratio(routing.skipped, verdicts.len()),
        verdicts,
        cost,
        routing,
    })
}

fn live_call<'a, S: Scalar>(pipeline: &'a EntityPipeline<S>, doc_id: &'a str) -> impl FnMut(Route, &str) -> Result<Vec<EntitySpan>, EntityError> + 'a {
    move |route, text| {
        let (stage, backend) = match route {
            Route::Distil => ("distil backend", &pipeline.distil.as_ref().expect("distil route").backend),
            _ => ("full backend", &pipeline.full),
        };
        let p = backend.predictor.predict(text).map_err(|source| EntityError::Backend {
            stage,
            stage_id: backend.predictor.id().into(),
            doc_id: doc_id.into(),
            source,
        })?;
        p.entities().map(<[EntitySpan]>::to_vec).ok_or_else(|| EntityError::WrongKind { stage, doc_id: doc_id.into() })
    }
}

/// Triage of one document at the pipeline's configured thresholds.
pub fn triage_document<S: Scalar>(pipeline: &EntityPipeline<S>, doc: &Document) -> Result<NerOutcome<S>, EntityError> {
    triage_documents(pipeline, std::slice::from_ref(doc)).map(|mut v| v.remove(0))
}

/// Triage of many documents; gate calls are batched across documents,
/// backend calls are one per document and route.
pub fn triage_documents<S: Scalar>(pipeline: &EntityPipeline<S>, docs: &[Document]) -> Result<Vec<NerOutcome<S>>, EntityError> {
    pipeline.validate()?;
    let mut gates = gate_documents(pipeline, docs, false)?;
    let t_entity = pipeline.entity_gate.threshold;
    if let Some(d) = &pipeline.distil {
        // distil gate only on sentences that survive the entity gate
        let mut texts = Vec::new();
        let mut ids = Vec::new();
        let mut slots = Vec::new();
        for (k, (g, doc)) in gates.iter().zip(docs).enumerate() {
            for (i, dist) in g.entity.iter().enumerate() {
                if !skip(&pipeline.entity_gate, dist, t_entity) {
                    texts.push(g.sentences[i].0.as_str());
                    ids.push(doc.id.as_str());
                    slots.push((k, i));
                }
            }
        }
        let preds = gate_predictions("distil gate", &d.gate, &texts, &ids, pipeline.batch_size)?;
        drop(texts);
        for ((k, i), p) in slots.into_iter().zip(preds) {
            gates[k].distil[i] = Some(p);
        }
    }
    let t_distil = pipeline.distil.as_ref().map_or(S::one(), |d| d.gate.threshold);
    docs.iter()
        .zip(&gates)
        .map(|(doc, g)| route_document(pipeline, &doc.id, g, t_entity, t_distil, &mut live_call(pipeline, &doc.id)))
        .collect()
}

/// Two-stage triage: `gate` skips confidently entity-free sentences, the
/// rest go to `backend`.
pub fn entitybear_triage<S: Scalar>(gate: GateStage<S>, backend: BackendStage<S>, doc: &Document) -> Result<NerOutcome<S>, EntityError> {
    triage_document(&EntityPipeline::entitybear(gate, backend)?, doc)
}

/// Three-stage triage with a distilled backend between the gate and the full backend.
pub fn distilbear_triage<S: Scalar>(
    gate: GateStage<S>,
    distil: DistilStage<S>,
    full: BackendStage<S>,
    doc: &Document,
) -> Result<NerOutcome<S>, EntityError> {
    triage_document(&EntityPipeline::distilbear(gate, distil, full)?, doc)
}

/// `(text, no-entity | with-entity)` per sentence.
pub fn build_entitybear_training(sentences: &[TaggedSentence]) -> Result<Vec<(String, String)>, CorpusError> {
    sentences
        .iter()
        .map(|s| {
            let label = if tags_to_spans(s)?.is_empty() { NO_ENTITY } else { WITH_ENTITY };
            Ok((s.text.clone(), label.to_string()))
        })
        .collect()
}

fn span_set(spans: &[EntitySpan]) -> BTreeSet<(usize, usize, &str)> {
    spans.iter().map(|s| (s.start, s.end, s.etype.as_str())).collect()
}

/// `(text, "1")` where the distilled backend's spans equal the reference
/// spans exactly (boundaries and types), `(text, "0")` otherwise.
pub fn build_distilbear_training<S: Scalar>(
    sentences: &[(String, Vec<EntitySpan>)],
    distil_backend: &dyn Predictor<S>,
    batch_size: usize,
) -> Result<Vec<(String, String)>, EntityError> {
    let texts: Vec<&str> = sentences.iter().map(|(t, _)| t.as_str()).collect();
    let preds = predict_all(distil_backend, &texts, batch_size).map_err(|(i, source)| EntityError::Backend {
        stage: "distil backend",
        stage_id: distil_backend.id().into(),
        doc_id: format!("sentence {i}"),
        source,
    })?;
    sentences
        .iter()
        .zip(preds)
        .enumerate()
        .map(|(i, ((text, reference), p))| {
            let got = p.entities().ok_or_else(|| EntityError::WrongKind { stage: "distil backend", doc_id: format!("sentence {i}") })?;
            let label = if span_set(got) == span_set(reference) { DISTIL_OK } else { DISTIL_NOT_OK };
            Ok((text.clone(), label.to_string()))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct Prf<S> {
    pub precision: S,
    pub recall: S,
    pub f1: S,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

/// Micro-averaged exact-match scores over `(predicted, gold)` pairs.
/// Precision is 0 with no predictions, recall 0 with no gold spans.
pub fn entity_f1<S: Scalar>(pairs: &[(&[EntitySpan], &[EntitySpan])]) -> Prf<S> {
    let (mut tp, mut n_pred, mut n_gold) = (0, 0, 0);
    for (pred, gold) in pairs {
        let mut remaining: HashMap<(usize, usize, &str), usize> = HashMap::new();
        for g in *gold {
            *remaining.entry((g.start, g.end, g.etype.as_str())).or_default() += 1;
        }
        for p in *pred {
            if let Some(n) = remaining.get_mut(&(p.start, p.end, p.etype.as_str())) {
                if *n > 0 {
                    *n -= 1;
                    tp += 1;
                }
            }
        }
        n_pred += pred.len();
        n_gold += gold.len();
    }
    let precision: S = ratio(tp, n_pred);
    let recall: S = ratio(tp, n_gold);
    let f1 = if precision + recall > S::zero() { S::lit(2.0) * precision * recall / (precision + recall) } else { S::zero() };
    Prf { precision, recall, f1, true_positives: tp, false_positives: n_pred - tp, false_negatives: n_gold - tp }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityHistogram {
    /// Entities per sentence → number of sentences.
    pub counts: BTreeMap<usize, usize>,
    pub no_entity_fraction: f64,
}

impl EntityHistogram {
    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    /// `entities,sentences,fraction`
    pub fn to_csv(&self) -> String {
        let total = self.total();
        let mut out = String::from("entities,sentences,fraction\n");
        for (k, n) in &self.counts {
            let _ = writeln!(out, "{k},{n},{}", ratio::<f64>(*n, total));
        }
        out
    }
}

pub fn entity_histogram(sentences: &[TaggedSentence]) -> Result<EntityHistogram, CorpusError> {
    let mut counts = BTreeMap::new();
    for s in sentences {
        *counts.entry(tags_to_spans(s)?.len()).or_insert(0) += 1;
    }
    let total: usize = counts.values().sum();
    let no_entity_fraction = ratio(counts.get(&0).copied().unwrap_or(0), total);
    Ok(EntityHistogram { counts, no_entity_fraction })
}

/// Which threshold an entity sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKnob {
    Entity,
    Distil,
}

/// Precomputed gate outputs plus memoized backend responses, so sweeping
/// thresholds calls every predictor at most once per distinct input.
pub struct EntitySweeper<'a, S> {
    pipeline: &'a EntityPipeline<S>,
    docs: &'a [Document],
    gates: Vec<DocGates<S>>,
    memo: HashMap<(Route, String), Vec<EntitySpan>>,
}

impl<'a, S: Scalar> EntitySweeper<'a, S> {
    pub fn new(pipeline: &'a EntityPipeline<S>, docs: &'a [Document]) -> Result<Self, EntityError> {
        pipeline.validate()?;
        let gates = gate_documents(pipeline, docs, true)?;
        Ok(EntitySweeper { pipeline, docs, gates, memo: HashMap::new() })
    }

    /// Outcomes at the given thresholds, equal to live triage at those thresholds.
    pub fn outcomes(&mut self, t_entity: S, t_distil: S) -> Result<Vec<NerOutcome<S>>, EntityError> {
        let EntitySweeper { pipeline, docs, gates, memo } = self;
        docs.iter()
            .zip(gates.iter())
            .map(|(doc, g)| {
                let mut live = live_call(pipeline, &doc.id);
                let mut call = |route: Route, text: &str| -> Result<Vec<EntitySpan>, EntityError> {
                    let key = (if route == Route::Distil { Route::Distil } else { Route::Bert }, text.to_string());
                    if let Some(hit) = memo.get(&key) {
                        return Ok(hit.clone());
                    }
                    let spans = live(route, text)?;
                    memo.insert(key, spans.clone());
                    Ok(spans)
                };
                route_document(pipeline, &doc.id, g, t_entity, t_distil, &mut call)
            })
            .collect()
    }

    /// Full-backend spans on every whole document: the reference when gold is absent.
    pub fn final_stage_references(&mut self) -> Result<HashMap<String, Vec<EntitySpan>>, EntityError> {
        let outs = self.outcomes(S::one(), S::one())?;
        Ok(outs.into_iter().map(|o| (o.doc_id, o.predicted)).collect())
    }

    /// One point per grid value, varying `knob` with the other threshold at `fixed`.
    pub fn sweep(
        &mut self,
        reference: &HashMap<String, Vec<EntitySpan>>,
        reference_kind: ReferenceKind,
        grid: &[S],
        knob: EntityKnob,
        fixed: S,
    ) -> Result<Vec<SweepPoint<S>>, CalibrateError> {
        validate_grid(grid)?;
        grid.iter()
            .map(|&c| {
                let (te, td) = match knob {
                    EntityKnob::Entity => (c, fixed),
                    EntityKnob::Distil => (fixed, c),
                };
                let outs = self.outcomes(te, td).map_err(|e| CalibrateError::Accounting(AccountingError::Inconsistent(e.to_string())))?;
                let report = make_entity_report(&outs, reference, reference_kind, &[te, td])?;
                Ok(SweepPoint {
                    threshold: c,
                    accuracy: report.metric.headline(),
                    savings_docs: report.savings_docs,
                    savings_cost: report.savings_cost,
                    stage_counts: report.stage_counts,
                })
            })
            .collect()
    }
}

/// Gold spans when every document has them, else `None`.
pub fn gold_entity_references(docs: &[Document]) -> Option<HashMap<String, Vec<EntitySpan>>> {
    docs.iter().map(|d| d.gold_entities.clone().map(|e| (d.id.clone(), e))).collect()
}

#[derive(Clone)]
pub struct EntityCalibration<S> {
    pub pipeline: EntityPipeline<S>,
    pub entity: Option<CalibrationResult<S>>,
    pub distil: Option<CalibrationResult<S>>,
}

/// Calibrates the entity gate, then the distil gate, against F1 floors.
/// A `None` floor keeps that threshold as configured. The distil gate is
/// pinned at 1.0 (always the full backend) while the entity gate is tuned.
pub fn calibrate_entity_pipeline<S: Scalar>(
    pipeline: &EntityPipeline<S>,
    docs: &[Document],
    reference: &HashMap<String, Vec<EntitySpan>>,
    reference_kind: ReferenceKind,
    entity_floor: Option<S>,
    distil_floor: Option<S>,
    grid: &[S],
) -> Result<EntityCalibration<S>, CalibrateError> {
    let mut sweeper = EntitySweeper::new(pipeline, docs).map_err(|e| CalibrateError::Accounting(AccountingError::Inconsistent(e.to_string())))?;
    let mut t_entity = pipeline.entity_gate.threshold;
    let configured_distil = pipeline.distil.as_ref().map_or(S::one(), |d| d.gate.threshold);
    let entity = match entity_floor {
        Some(floor) => {
            let fixed = if distil_floor.is_some() { S::one() } else { configured_distil };
            let curve = sweeper.sweep(reference, reference_kind, grid, EntityKnob::Entity, fixed)?;
            let r = find_threshold(&curve, floor)?;
            t_entity = r.threshold;
            Some(r)
        }
        None => None,
    };
    let mut t_distil = configured_distil;
    let distil = match (distil_floor, pipeline.distil.is_some()) {
        (Some(floor), true) => {
            let curve = sweeper.sweep(reference, reference_kind, grid, EntityKnob::Distil, t_entity)?;
            let r = find_threshold(&curve, floor)?;
            t_distil = r.threshold;
            Some(r)
        }
        _ => None,
    };
    let calibrated = pipeline
        .with_thresholds(t_entity, Some(t_distil))
        .map_err(|e| CalibrateError::Accounting(AccountingError::Inconsistent(e.to_string())))?;
    Ok(EntityCalibration { pipeline: calibrated, entity, distil })
}
