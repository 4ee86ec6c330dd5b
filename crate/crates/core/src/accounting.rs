//! Savings, accuracy and cost aggregation, and the run report.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::EntitySpan;
use crate::entity::{entity_f1, NerOutcome, Route};
use crate::model::TaskKind;
use crate::scalar::{ratio, Scalar};
use crate::triage::TriageOutcome;

/// Shown next to every cost figure: costs are modeled, not measured.
pub const COST_UNITS_NOTE: &str = "abstract cost units per input character; stage ratios are illustrative unless configured";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AccountingError {
    #[error("no outcomes to aggregate")]
    Empty,
    #[error("no reference for document {0:?}")]
    MissingReference(String),
    #[error("inconsistent inputs: {0}")]
    Inconsistent(String),
}

/// Per-stage wall-clock statistics of backend calls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub calls: usize,
    pub mean_secs: f64,
    pub std_secs: f64,
}

impl LatencyStats {
    /// Mean and population standard deviation.
    pub fn from_samples(samples: &[Duration]) -> Self {
        let n = samples.len();
        if n == 0 {
            return LatencyStats { calls: 0, mean_secs: 0.0, std_secs: 0.0 };
        }
        let secs: Vec<f64> = samples.iter().map(Duration::as_secs_f64).collect();
        let mean = secs.iter().sum::<f64>() / n as f64;
        let var = secs.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n as f64;
        LatencyStats { calls: n, mean_secs: mean, std_secs: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct CostModel<S> {
    /// Cost units per character, one per stage.
    pub unit_costs: Vec<S>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latencies: Option<Vec<LatencyStats>>,
}

impl<S: Scalar> CostModel<S> {
    pub fn new(unit_costs: Vec<S>) -> Result<Self, AccountingError> {
        let m = CostModel { unit_costs, latencies: None };
        m.validate()?;
        Ok(m)
    }

    /// Baby 1 : final 100, for illustration only.
    pub fn illustrative() -> Self {
        CostModel { unit_costs: vec![S::one(), S::lit(100.0)], latencies: None }
    }

    pub fn validate(&self) -> Result<(), AccountingError> {
        if self.unit_costs.is_empty() {
            return Err(AccountingError::Inconsistent("cost model has no stages".into()));
        }
        if self.unit_costs.iter().any(|c| !(c.is_finite() && *c >= S::zero())) {
            return Err(AccountingError::Inconsistent("unit costs must be finite and nonnegative".into()));
        }
        if self.unit_costs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(AccountingError::Inconsistent("unit costs must strictly increase".into()));
        }
        Ok(())
    }

    pub fn final_cost(&self) -> S {
        *self.unit_costs.last().expect("validated cost model")
    }
}

/// Fraction of documents answered before the final stage.
pub fn savings_docs<S: Scalar>(outcomes: &[TriageOutcome<S>]) -> Result<S, AccountingError> {
    if outcomes.is_empty() {
        return Err(AccountingError::Empty);
    }
    Ok(ratio(outcomes.iter().filter(|o| !o.answered_by_final).count(), outcomes.len()))
}

/// `1 - (final-stage cost incurred) / (final-stage cost if every document
/// reached it)`, weighting each document by its length.
pub fn savings_cost<S: Scalar>(outcomes: &[TriageOutcome<S>], cost_model: &CostModel<S>) -> Result<S, AccountingError> {
    if outcomes.is_empty() {
        return Err(AccountingError::Empty);
    }
    cost_model.validate()?;
    // the final stage's unit cost scales both sums and cancels
    let all: usize = outcomes.iter().map(|o| o.chars).sum();
    let spared: usize = outcomes.iter().filter(|o| !o.answered_by_final).map(|o| o.chars).sum();
    Ok(ratio(spared, all))
}

/// Fraction of documents whose argmax label equals the reference.
pub fn accuracy<S: Scalar>(outcomes: &[TriageOutcome<S>], reference: &HashMap<String, String>) -> Result<S, AccountingError> {
    if outcomes.is_empty() {
        return Err(AccountingError::Empty);
    }
    let mut correct = 0;
    for o in outcomes {
        let want = reference.get(&o.doc_id).ok_or_else(|| AccountingError::MissingReference(o.doc_id.clone()))?;
        if o.label() == Some(want.as_str()) {
            correct += 1;
        }
    }
    Ok(ratio(correct, outcomes.len()))
}

pub fn stage_counts<S: Scalar>(outcomes: &[TriageOutcome<S>], n_stages: usize) -> Vec<usize> {
    let mut counts = vec![0; n_stages];
    for o in outcomes {
        counts[o.answering_stage] += 1;
    }
    counts
}

/// What performance was measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    /// Gold annotations: accuracy proper.
    Gold,
    /// Final-stage outputs: accuracy is the agreement rate with the final model.
    FinalStage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SavingsBasis {
    Documents,
    Sentences,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", bound = "S: Scalar")]
pub enum Metric<S> {
    Accuracy { value: S, reference: ReferenceKind },
    EntityF1 { precision: S, recall: S, f1: S, reference: ReferenceKind },
}

impl<S: Scalar> Metric<S> {
    /// Accuracy, or F1 for entity tasks.
    pub fn headline(&self) -> S {
        match self {
            Metric::Accuracy { value, .. } => *value,
            Metric::EntityF1 { f1, .. } => *f1,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Metric::Accuracy { reference: ReferenceKind::Gold, .. } => "accuracy",
            Metric::Accuracy { reference: ReferenceKind::FinalStage, .. } => "agreement",
            Metric::EntityF1 { reference: ReferenceKind::Gold, .. } => "f1",
            Metric::EntityF1 { reference: ReferenceKind::FinalStage, .. } => "f1_vs_final",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct RunReport<S> {
    pub task: TaskKind,
    pub n_docs: usize,
    pub savings_basis: SavingsBasis,
    /// Routing units: documents, or sentences for entity tasks.
    pub n_units: usize,
    pub savings_docs: S,
    pub savings_cost: S,
    pub metric: Metric<S>,
    pub thresholds: Vec<S>,
    /// Units answered (or routed) per stage.
    pub stage_counts: Vec<usize>,
    pub total_cost: S,
    pub cost_units: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock: Option<Vec<LatencyStats>>,
}

impl<S: Scalar> RunReport<S> {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    /// One header line and one data line.
    pub fn to_csv(&self) -> String {
        let mut header = String::from("task,n_docs,n_units,savings_basis,savings_docs,savings_cost,metric,value,total_cost");
        for i in 0..self.thresholds.len() {
            let _ = write!(header, ",threshold_{i}");
        }
        for i in 0..self.stage_counts.len() {
            let _ = write!(header, ",stage_{i}_count");
        }
        let task = match self.task {
            TaskKind::Classification => "classification",
            TaskKind::EntityRecognition => "entity-recognition",
        };
        let basis = match self.savings_basis {
            SavingsBasis::Documents => "documents",
            SavingsBasis::Sentences => "sentences",
        };
        let mut row = format!(
            "{task},{},{},{basis},{},{},{},{},{}",
            self.n_docs,
            self.n_units,
            self.savings_docs,
            self.savings_cost,
            self.metric.label(),
            self.metric.headline(),
            self.total_cost
        );
        for t in &self.thresholds {
            let _ = write!(row, ",{t}");
        }
        for c in &self.stage_counts {
            let _ = write!(row, ",{c}");
        }
        format!("{header}\n{row}\n")
    }
}

/// Aggregates classification outcomes. Outcomes are sorted by document id
/// first so the result does not depend on arrival order.
pub fn make_report<S: Scalar>(
    outcomes: &[TriageOutcome<S>],
    reference: &HashMap<String, String>,
    reference_kind: ReferenceKind,
    cost_model: &CostModel<S>,
    thresholds: &[S],
) -> Result<RunReport<S>, AccountingError> {
    if outcomes.is_empty() {
        return Err(AccountingError::Empty);
    }
    cost_model.validate()?;
    let n_stages = cost_model.unit_costs.len();
    if thresholds.len() + 1 != n_stages {
        return Err(AccountingError::Inconsistent(format!("{} thresholds for {n_stages} stages", thresholds.len())));
    }
    if let Some(o) = outcomes.iter().find(|o| o.answering_stage >= n_stages) {
        return Err(AccountingError::Inconsistent(format!("{} answered at stage {} of {n_stages}", o.doc_id, o.answering_stage)));
    }
    let mut sorted: Vec<&TriageOutcome<S>> = outcomes.iter().collect();
    sorted.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
    if sorted.windows(2).any(|w| w[0].doc_id == w[1].doc_id) {
        return Err(AccountingError::Inconsistent("duplicate document ids".into()));
    }
    let sorted: Vec<TriageOutcome<S>> = sorted.into_iter().cloned().collect();
    let stage_counts = stage_counts(&sorted, n_stages);
    Ok(RunReport {
        task: TaskKind::Classification,
        n_docs: sorted.len(),
        savings_basis: SavingsBasis::Documents,
        n_units: sorted.len(),
        savings_docs: savings_docs(&sorted)?,
        savings_cost: savings_cost(&sorted, cost_model)?,
        metric: Metric::Accuracy { value: accuracy(&sorted, reference)?, reference: reference_kind },
        thresholds: thresholds.to_vec(),
        stage_counts,
        total_cost: sorted.iter().map(|o| o.cost).sum(),
        cost_units: COST_UNITS_NOTE.into(),
        wall_clock: cost_model.latencies.clone(),
    })
}

/// Aggregates entity-pipeline outcomes; savings are counted in sentences.
///
/// `stage_counts` are sentences skipped, routed to the distilled model,
/// and routed to the full model.
pub fn make_entity_report<S: Scalar>(
    outcomes: &[NerOutcome<S>],
    reference: &HashMap<String, Vec<EntitySpan>>,
    reference_kind: ReferenceKind,
    thresholds: &[S],
) -> Result<RunReport<S>, AccountingError> {
    if outcomes.is_empty() {
        return Err(AccountingError::Empty);
    }
    let mut sorted: Vec<&NerOutcome<S>> = outcomes.iter().collect();
    sorted.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
    let mut pairs = Vec::with_capacity(sorted.len());
    for o in &sorted {
        let gold = reference.get(&o.doc_id).ok_or_else(|| AccountingError::MissingReference(o.doc_id.clone()))?;
        pairs.push((o.predicted.as_slice(), gold.as_slice()));
    }
    let prf = entity_f1::<S>(&pairs);
    let mut counts = vec![0usize; 3];
    let (mut total_chars, mut full_chars) = (0usize, 0usize);
    for o in &sorted {
        for v in &o.verdicts {
            let slot = match v.routed_to {
                Route::Skipped => 0,
                Route::Distil => 1,
                Route::Mamabear | Route::Bert => 2,
            };
            counts[slot] += 1;
            total_chars += v.chars;
            if slot == 2 {
                full_chars += v.chars;
            }
        }
    }
    let units: usize = counts.iter().sum();
    Ok(RunReport {
        task: TaskKind::EntityRecognition,
        n_docs: sorted.len(),
        savings_basis: SavingsBasis::Sentences,
        n_units: units,
        savings_docs: ratio(counts[0], units),
        savings_cost: if total_chars == 0 { S::zero() } else { S::one() - ratio::<S>(full_chars, total_chars) },
        metric: Metric::EntityF1 { precision: prf.precision, recall: prf.recall, f1: prf.f1, reference: reference_kind },
        thresholds: thresholds.to_vec(),
        stage_counts: counts,
        total_cost: sorted.iter().map(|o| o.cost).sum(),
        cost_units: COST_UNITS_NOTE.into(),
        wall_clock: None,
    })
}

/// A row in the dataset summary table:
/// name, #labels, Train(K), Val.(K), Test(K), Threshold, Saving, Accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub name: String,
    pub n_labels: Option<usize>,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub threshold: f64,
    /// Fraction in `[0, 1]`; rendered as a percentage.
    pub saving: f64,
    /// Fraction in `[0, 1]`; rendered as a percentage.
    pub accuracy: f64,
}

pub const TABLE_HEADER: &str = "| Name | #labels | Train(K) | Val.(K) | Test(K) | Threshold | Saving | Accuracy |";

fn strip_leading_zero(s: String) -> String {
    match s.strip_prefix("0.") {
        Some(rest) => format!(".{rest}"),
        None => s,
    }
}

fn thousands(n: usize) -> String {
    let s = format!("{:.1}", n as f64 / 1000.0);
    strip_leading_zero(s.strip_suffix(".0").map(str::to_string).unwrap_or(s))
}

impl TableRow {
    pub fn render(&self) -> String {
        format!(
            "| {} | {} | {} | {} | {} | {} | {:.1} | {:.1} |",
            self.name,
            self.n_labels.map_or("-".to_string(), |n| n.to_string()),
            thousands(self.train),
            thousands(self.validation),
            thousands(self.test),
            strip_leading_zero(format!("{:.3}", self.threshold)),
            self.saving * 100.0,
            self.accuracy * 100.0
        )
    }
}
