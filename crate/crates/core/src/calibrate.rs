//! Threshold search: sweep a grid of candidate thresholds on validation
//! data and keep the smallest one whose accuracy meets the floor.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accounting::{self, AccountingError, CostModel};
use crate::corpus::Document;
use crate::scalar::Scalar;
use crate::triage::{Cascade, ConfigError, PredictionTable, TriageError, TriageOutcome};

pub const DEFAULT_CLASSIFICATION_FLOOR: f64 = 0.9;
pub const DEFAULT_ENTITY_FLOOR: f64 = 0.99;
pub const DEFAULT_GRID_STEPS: usize = 200;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CalibrateError {
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("accuracy floor {0} outside (0, 1]")]
    Floor(f64),
    #[error("empty sweep curve")]
    EmptyCurve,
    #[error("expected {expected} floors (one per non-final stage), got {found}")]
    FloorCount { expected: usize, found: usize },
    #[error("reference labels do not cover document {0:?}")]
    MissingReference(String),
    #[error(transparent)]
    Triage(#[from] TriageError),
    #[error(transparent)]
    Accounting(#[from] AccountingError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// `steps + 1` evenly spaced points from 0 to 1 inclusive.
pub fn uniform_grid<S: Scalar>(steps: usize) -> Vec<S> {
    let steps = steps.max(1);
    (0..=steps).map(|i| S::from_count(i) / S::from_count(steps)).collect()
}

/// 0.000, 0.005, ..., 1.000.
pub fn default_grid<S: Scalar>() -> Vec<S> {
    uniform_grid(DEFAULT_GRID_STEPS)
}

pub fn validate_grid<S: Scalar>(grid: &[S]) -> Result<(), CalibrateError> {
    if grid.is_empty() {
        return Err(CalibrateError::Grid("no candidate thresholds".into()));
    }
    if let Some(c) = grid.iter().find(|c| !(**c >= S::zero() && **c <= S::one())) {
        return Err(CalibrateError::Grid(format!("value {c} outside [0, 1]")));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(CalibrateError::Grid("values must strictly increase".into()));
    }
    Ok(())
}

fn validate_floor<S: Scalar>(floor: S) -> Result<(), CalibrateError> {
    if floor > S::zero() && floor <= S::one() {
        Ok(())
    } else {
        Err(CalibrateError::Floor(floor.as_f64()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct SweepPoint<S> {
    pub threshold: S,
    /// Accuracy (or agreement), or F1 for entity tasks.
    pub accuracy: S,
    pub savings_docs: S,
    pub savings_cost: S,
    pub stage_counts: Vec<usize>,
}

/// Aggregates one grid point. Shared by [`sweep`] and any re-triage
/// path so both produce bit-identical points.
pub fn point_from_outcomes<S: Scalar>(
    threshold: S,
    outcomes: &[TriageOutcome<S>],
    reference: &HashMap<String, String>,
    cost_model: &CostModel<S>,
) -> Result<SweepPoint<S>, CalibrateError> {
    Ok(SweepPoint {
        threshold,
        accuracy: accounting::accuracy(outcomes, reference)?,
        savings_docs: accounting::savings_docs(outcomes)?,
        savings_cost: accounting::savings_cost(outcomes, cost_model)?,
        stage_counts: accounting::stage_counts(outcomes, cost_model.unit_costs.len()),
    })
}

fn check_references(doc_ids: &[String], reference: &HashMap<String, String>) -> Result<(), CalibrateError> {
    match doc_ids.iter().find(|id| !reference.contains_key(*id)) {
        Some(id) => Err(CalibrateError::MissingReference(id.clone())),
        None => Ok(()),
    }
}

fn sweep_table<S: Scalar>(
    table: &PredictionTable<S>,
    base: &[S],
    stage: usize,
    reference: &HashMap<String, String>,
    cost_model: &CostModel<S>,
    grid: &[S],
) -> Result<Vec<SweepPoint<S>>, CalibrateError> {
    let mut thresholds = base.to_vec();
    grid.iter()
        .map(|&c| {
            thresholds[stage] = c;
            point_from_outcomes(c, &table.replay(&thresholds), reference, cost_model)
        })
        .collect()
}

/// Evaluates the cascade at every grid value for non-final `stage`, other
/// thresholds held at their configured values. Every stage predicts each
/// document once.
pub fn sweep<S: Scalar>(
    cascade: &Cascade<S>,
    docs: &[Document],
    reference: &HashMap<String, String>,
    grid: &[S],
    stage: usize,
) -> Result<Vec<SweepPoint<S>>, CalibrateError> {
    validate_grid(grid)?;
    if stage + 1 >= cascade.len() {
        return Err(ConfigError::FinalThreshold.into());
    }
    let ids: Vec<String> = docs.iter().map(|d| d.id.clone()).collect();
    check_references(&ids, reference)?;
    let table = PredictionTable::compute(cascade, docs)?;
    sweep_table(&table, &cascade.thresholds(), stage, reference, &CostModel::new(cascade.unit_costs())?, grid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct CalibrationResult<S> {
    pub threshold: S,
    pub floor: S,
    /// Accuracy at `threshold`; `None` only on shortfall when the grid lacks 1.0.
    pub achieved: Option<S>,
    /// No grid value met the floor; `threshold` fell back to 1.0.
    pub shortfall: bool,
    pub curve: Vec<SweepPoint<S>>,
    pub grid: Vec<S>,
}

/// Smallest threshold on the curve whose accuracy is at least `floor`,
/// or 1.0 with `shortfall` set.
pub fn find_threshold<S: Scalar>(curve: &[SweepPoint<S>], floor: S) -> Result<CalibrationResult<S>, CalibrateError> {
    validate_floor(floor)?;
    if curve.is_empty() {
        return Err(CalibrateError::EmptyCurve);
    }
    let mut curve = curve.to_vec();
    curve.sort_by(|a, b| a.threshold.partial_cmp(&b.threshold).expect("finite thresholds"));
    let grid = curve.iter().map(|p| p.threshold).collect();
    let (threshold, achieved, shortfall) = match curve.iter().find(|p| p.accuracy >= floor) {
        Some(p) => (p.threshold, Some(p.accuracy), false),
        None => (S::one(), curve.iter().find(|p| p.threshold == S::one()).map(|p| p.accuracy), true),
    };
    Ok(CalibrationResult { threshold, floor, achieved, shortfall, curve, grid })
}

#[derive(Clone)]
pub struct CascadeCalibration<S> {
    pub cascade: Cascade<S>,
    /// Per non-final stage; `None` for stages left pinned.
    pub results: Vec<Option<CalibrationResult<S>>>,
}

/// Calibrates non-final stages front to back. `floors[i] = None` pins
/// stage `i` at its configured threshold. While stage `i` is tuned,
/// earlier stages keep their calibrated thresholds and later tunable
/// stages sit at 1.0.
pub fn calibrate_cascade<S: Scalar>(
    cascade: &Cascade<S>,
    docs: &[Document],
    reference: &HashMap<String, String>,
    floors: &[Option<S>],
    grid: &[S],
) -> Result<CascadeCalibration<S>, CalibrateError> {
    validate_grid(grid)?;
    let tunable = cascade.len() - 1;
    if floors.len() != tunable {
        return Err(CalibrateError::FloorCount { expected: tunable, found: floors.len() });
    }
    for f in floors.iter().flatten() {
        validate_floor(*f)?;
    }
    let table = PredictionTable::compute(cascade, docs)?;
    calibrate_with_table(cascade, &table, reference, floors, grid)
}

/// [`calibrate_cascade`] over predictions already computed for `cascade`,
/// e.g. when the references come from the same table.
pub fn calibrate_with_table<S: Scalar>(
    cascade: &Cascade<S>,
    table: &PredictionTable<S>,
    reference: &HashMap<String, String>,
    floors: &[Option<S>],
    grid: &[S],
) -> Result<CascadeCalibration<S>, CalibrateError> {
    validate_grid(grid)?;
    let tunable = cascade.len() - 1;
    if floors.len() != tunable || table.n_stages() != cascade.len() {
        return Err(CalibrateError::FloorCount { expected: tunable, found: floors.len() });
    }
    for f in floors.iter().flatten() {
        validate_floor(*f)?;
    }
    check_references(table.doc_ids(), reference)?;
    let cost_model = CostModel::new(cascade.unit_costs())?;

    let mut thresholds = cascade.thresholds();
    for (i, f) in floors.iter().enumerate() {
        if f.is_some() {
            thresholds[i] = S::one();
        }
    }
    let mut results = Vec::with_capacity(tunable);
    for (stage, floor) in floors.iter().enumerate() {
        let Some(floor) = *floor else {
            results.push(None);
            continue;
        };
        let curve = sweep_table(table, &thresholds, stage, reference, &cost_model, grid)?;
        let result = find_threshold(&curve, floor)?;
        thresholds[stage] = result.threshold;
        results.push(Some(result));
    }
    let mut calibrated = cascade.clone();
    for (stage, &t) in thresholds.iter().enumerate() {
        calibrated = calibrated.with_threshold(stage, t)?;
    }
    Ok(CascadeCalibration { cascade: calibrated, results })
}

/// Gold labels when every document has one, else `None`.
pub fn gold_references(docs: &[Document]) -> Option<HashMap<String, String>> {
    docs.iter().map(|d| d.gold_label.clone().map(|l| (d.id.clone(), l))).collect()
}

/// Final-stage argmax labels, for measuring agreement when gold is absent.
pub fn final_stage_references<S: Scalar>(table: &PredictionTable<S>) -> HashMap<String, String> {
    let last = table.n_stages() - 1;
    table
        .doc_ids()
        .iter()
        .enumerate()
        .filter_map(|(d, id)| table.prediction(last, d).distribution().map(|dist| (id.clone(), dist.argmax_label().to_string())))
        .collect()
}

/// `threshold,accuracy,savings_docs,savings_cost,stage_0_count,...`
pub fn curve_to_csv<S: Scalar>(curve: &[SweepPoint<S>]) -> String {
    let n_stages = curve.first().map_or(0, |p| p.stage_counts.len());
    let mut out = String::from("threshold,accuracy,savings_docs,savings_cost");
    for i in 0..n_stages {
        let _ = write!(out, ",stage_{i}_count");
    }
    out.push('\n');
    for p in curve {
        let _ = write!(out, "{},{},{},{}", p.threshold, p.accuracy, p.savings_docs, p.savings_cost);
        for c in &p.stage_counts {
            let _ = write!(out, ",{c}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::confidence::ConfidenceFn;
    use crate::mock::FnPredictor;
    use crate::model::LabelDistribution;
    use crate::triage::{triage_batch, CascadeStage};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn labels() -> Vec<String> {
        vec!["a".into(), "b".into()]
    }

    /// Text "p:<prob of a>" is answered with that distribution.
    fn scripted(id: &str) -> Arc<FnPredictor<f64>> {
        Arc::new(FnPredictor::classifier(id, labels(), |t: &str| {
            let p: f64 = t.split(':').nth(1).and_then(|s| s.split_whitespace().next()).unwrap().parse().unwrap();
            LabelDistribution::new(labels(), vec![p, 1.0 - p]).map_err(|e| crate::model::PredictorError::Failed(e.to_string()))
        }))
    }

    fn always(id: &str, label: usize) -> Arc<FnPredictor<f64>> {
        Arc::new(FnPredictor::classifier(id, labels(), move |_| Ok(LabelDistribution::one_hot(labels(), label).unwrap())))
    }

    fn two_stage(baby: Arc<FnPredictor<f64>>, mama: Arc<FnPredictor<f64>>, t: f64) -> Cascade<f64> {
        Cascade::new(vec![
            CascadeStage::new(baby, Some(t), ConfidenceFn::MaxProb, 1.0),
            CascadeStage::new(mama, None, ConfidenceFn::MaxProb, 100.0),
        ])
        .unwrap()
    }

    fn pt(threshold: f64, accuracy: f64) -> SweepPoint<f64> {
        SweepPoint { threshold, accuracy, savings_docs: 0.0, savings_cost: 0.0, stage_counts: vec![] }
    }

    #[test]
    fn default_grid_shape() {
        let g: Vec<f64> = default_grid();
        assert_eq!(g.len(), 201);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[200], 1.0);
        assert_eq!(g[165], 0.825);
        validate_grid(&g).unwrap();
        assert!(validate_grid(&[0.5, 0.5]).is_err());
        assert!(validate_grid(&[0.5, 1.5]).is_err());
        assert!(validate_grid::<f64>(&[]).is_err());
    }

    #[test]
    fn grid_boundaries() {
        let docs: Vec<Document> = (0..5).map(|i| Document::new(format!("d{i}"), format!("p:0.{}", i + 5)).with_label("b")).collect();
        let refs = gold_references(&docs).unwrap();
        let curve = sweep(&two_stage(scripted("baby"), always("mama", 1), 0.5), &docs, &refs, &[0.0, 1.0], 0).unwrap();
        assert_eq!(curve[0].savings_docs, 1.0);
        assert_eq!(curve[1].savings_docs, 0.0);
        assert_eq!(curve[1].accuracy, 1.0);
        assert_eq!(curve[1].stage_counts, vec![0, 5]);
    }

    #[test]
    fn single_doc_step() {
        let docs = vec![Document::new("x", "p:0.6").with_label("a")];
        let refs = gold_references(&docs).unwrap();
        let curve = sweep(&two_stage(scripted("baby"), always("mama", 0), 0.5), &docs, &refs, &[0.5, 0.7], 0).unwrap();
        assert_eq!(curve.iter().map(|p| p.savings_docs).collect::<Vec<_>>(), vec![1.0, 0.0]);
    }

    #[test]
    fn missing_reference_names_doc() {
        let docs = vec![Document::new("x", "p:0.6"), Document::new("y", "p:0.6")];
        let refs: HashMap<String, String> = [("x".to_string(), "a".to_string())].into_iter().collect();
        let err = sweep(&two_stage(scripted("baby"), always("mama", 0), 0.5), &docs, &refs, &[0.5], 0).unwrap_err();
        assert_eq!(err, CalibrateError::MissingReference("y".into()));
    }

    #[test]
    fn find_threshold_examples() {
        let all_good = vec![pt(0.0, 0.95), pt(0.5, 0.97), pt(1.0, 0.99)];
        let r = find_threshold(&all_good, 0.9).unwrap();
        assert_eq!((r.threshold, r.shortfall, r.achieved), (0.0, false, Some(0.95)));

        let only_top = vec![pt(0.0, 0.5), pt(0.5, 0.8), pt(1.0, 0.95)];
        let r = find_threshold(&only_top, 0.9).unwrap();
        assert_eq!((r.threshold, r.shortfall), (1.0, false));

        let none = vec![pt(0.0, 0.5), pt(1.0, 0.8)];
        let r = find_threshold(&none, 0.9).unwrap();
        assert_eq!((r.threshold, r.shortfall, r.achieved), (1.0, true, Some(0.8)));
        let r = find_threshold(&none[..1], 0.9).unwrap();
        assert_eq!((r.threshold, r.shortfall, r.achieved), (1.0, true, None));

        assert_eq!(find_threshold(&none, 0.0), Err(CalibrateError::Floor(0.0)));
        assert_eq!(find_threshold(&none, 1.1), Err(CalibrateError::Floor(1.1)));
        assert_eq!(find_threshold::<f64>(&[], 0.9), Err(CalibrateError::EmptyCurve));
    }

    #[test]
    fn accuracy_is_not_monotone() {
        // d0: baby right with low confidence, mama wrong
        // d1: baby wrong with high confidence, mama right
        let docs = vec![Document::new("d0", "p:0.55").with_label("a"), Document::new("d1", "p:0.95").with_label("b")];
        let mama = always("mama", 1);
        let refs = gold_references(&docs).unwrap();
        let curve = sweep(&two_stage(scripted("baby"), mama, 0.5), &docs, &refs, &[0.0, 0.6, 1.0], 0).unwrap();
        let acc: Vec<f64> = curve.iter().map(|p| p.accuracy).collect();
        assert_eq!(acc, vec![0.5, 0.0, 0.5]);
        assert!(curve.windows(2).all(|w| w[1].savings_docs <= w[0].savings_docs));
    }

    #[test]
    fn two_stage_reduces_to_sweep_and_find() {
        let docs: Vec<Document> =
            (0..40).map(|i| Document::new(format!("d{i}"), format!("p:{}", 0.5 + (i as f64) / 80.0)).with_label(if i % 3 == 0 { "b" } else { "a" })).collect();
        let refs = gold_references(&docs).unwrap();
        let cascade = two_stage(scripted("baby"), always("mama", 0), 0.5);
        let grid: Vec<f64> = uniform_grid(40);
        let cal = calibrate_cascade(&cascade, &docs, &refs, &[Some(0.7)], &grid).unwrap();
        let direct = find_threshold(&sweep(&cascade, &docs, &refs, &grid, 0).unwrap(), 0.7).unwrap();
        assert_eq!(cal.results[0].as_ref().unwrap(), &direct);
        assert_eq!(cal.cascade.thresholds(), vec![direct.threshold]);
    }

    #[test]
    fn pinned_stage_keeps_threshold() {
        let docs: Vec<Document> = (0..20).map(|i| Document::new(format!("d{i}"), format!("p:{}", 0.5 + (i as f64) / 40.0)).with_label("a")).collect();
        let refs = gold_references(&docs).unwrap();
        let cascade = Cascade::new(vec![
            CascadeStage::new(scripted("baby") as Arc<dyn crate::model::Predictor<f64>>, Some(0.5), ConfidenceFn::MaxProb, 1.0),
            CascadeStage::new(scripted("mid"), Some(0.42), ConfidenceFn::MaxProb, 10.0),
            CascadeStage::new(always("mama", 0), None, ConfidenceFn::MaxProb, 100.0),
        ])
        .unwrap();
        let cal = calibrate_cascade(&cascade, &docs, &refs, &[Some(0.9), None], &uniform_grid(20)).unwrap();
        assert_eq!(cal.cascade.thresholds()[1], 0.42);
        assert!(cal.results[1].is_none());
        assert!(calibrate_cascade(&cascade, &docs, &refs, &[Some(0.9)], &uniform_grid(20)).is_err());
    }

    #[test]
    fn csv_header() {
        let csv = curve_to_csv(&[SweepPoint { threshold: 0.5, accuracy: 1.0, savings_docs: 0.25, savings_cost: 0.5, stage_counts: vec![1, 3] }]);
        assert_eq!(csv, "threshold,accuracy,savings_docs,savings_cost,stage_0_count,stage_1_count\n0.5,1,0.25,0.5,1,3\n");
    }

    proptest! {
        #[test]
        fn sweep_matches_retriage(probs in prop::collection::vec(0.5f64..1.0, 1..30), flips in prop::collection::vec(any::<bool>(), 30)) {
            let docs: Vec<Document> = probs.iter().enumerate()
                .map(|(i, p)| Document::new(format!("d{i:02}"), format!("p:{p} {}", "x".repeat(i))).with_label(if flips[i] { "a" } else { "b" }))
                .collect();
            let refs = gold_references(&docs).unwrap();
            let cascade = two_stage(scripted("baby"), always("mama", 1), 0.5);
            let grid: Vec<f64> = uniform_grid(25);
            let curve = sweep(&cascade, &docs, &refs, &grid, 0).unwrap();
            let cm = CostModel::new(cascade.unit_costs()).unwrap();
            for (p, &c) in curve.iter().zip(&grid) {
                let outs = triage_batch(&cascade.with_threshold(0, c).unwrap(), &docs).unwrap();
                prop_assert_eq!(p, &point_from_outcomes(c, &outs, &refs, &cm).unwrap());
                prop_assert_eq!(p.stage_counts.iter().sum::<usize>(), docs.len());
            }
            prop_assert!(curve.windows(2).all(|w| w[1].savings_docs <= w[0].savings_docs));
        }

        #[test]
        fn find_threshold_order_independent(acc in prop::collection::vec(0.0f64..1.0, 1..40), floor in 0.01f64..1.0, seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let curve: Vec<_> = acc.iter().enumerate().map(|(i, &a)| pt(i as f64 / acc.len() as f64, a)).collect();
            let mut shuffled = curve.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = find_threshold(&curve, floor).unwrap();
            let b = find_threshold(&shuffled, floor).unwrap();
            prop_assert_eq!(&a, &b);
            let again = find_threshold(&a.curve, floor).unwrap();
            prop_assert_eq!(&a, &again);
            if !a.shortfall {
                prop_assert!(a.achieved.unwrap() >= floor);
            }
        }
    }
}
