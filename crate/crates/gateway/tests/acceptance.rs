//! Acceptance criteria, one pass/fail line each. Exits nonzero if any fails.

mod common;

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use babybear_core::accounting::{make_entity_report, savings_docs, ReferenceKind};
use babybear_core::calibrate::{calibrate_cascade, default_grid, find_threshold, gold_references, sweep, uniform_grid, SweepPoint};
use babybear_core::confidence::ConfidenceFn;
use babybear_core::corpus::{assemble_document, make_split, Document, SplitRatios};
use babybear_core::entity::{
    build_entitybear_training, calibrate_entity_pipeline, gold_entity_references, triage_document, triage_documents, BackendStage,
    EntityPipeline, EntitySweeper, GateStage,
};
use babybear_core::mock::{MockPredictor, MockResponse, MockSpec};
use babybear_core::model::{
    featurize, loss_and_gradient, oracle_label, train_baby, FeatureSpec, LabelDistribution, SparseVector, TrainConfig, NO_ENTITY,
    WITH_ENTITY,
};
use babybear_core::synth::{peaked, perfect_entity_gate, synthetic_classification, synthetic_tagged, tagged_documents};
use babybear_core::triage::{triage_batch, Cascade, CascadeStage, TriageOutcome};
use babybear_core::BabyModel;
use babybear_gateway::config::ActiveCascade;
use babybear_gateway::protocol::{PredictResponse, TriageResponse};
use babybear_gateway::{mock_router, service_router, BackgroundServer};
use common::*;
use proptest::prelude::*;
use proptest::test_runner::{Config as ProptestConfig, TestRunner};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;
type Criterion = (&'static str, &'static str, Duration, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn labels(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

fn mock_stage(spec: MockSpec, threshold: Option<f64>, confidence: ConfidenceFn, cost: f64) -> CascadeStage<f64> {
    CascadeStage::new(Arc::new(MockPredictor::<f64>::new(spec)), threshold, confidence, cost)
}

fn hand_accuracy(outs: &[TriageOutcome<f64>], gold: &HashMap<String, String>) -> f64 {
    let correct = outs.iter().filter(|o| o.label() == gold.get(&o.doc_id).map(String::as_str)).count();
    correct as f64 / outs.len() as f64
}

fn small_baby(docs: &[Document]) -> BabyModel<f64> {
    let examples: Vec<(String, String)> = docs.iter().map(|d| (d.text.clone(), d.gold_label.clone().unwrap())).collect();
    train_baby(&examples, &TrainConfig { feature_dim: 1 << 12, epochs: 8, ..TrainConfig::default() }, "gold").unwrap()
}

/// Stage 0 answers exactly when its confidence is strictly above t.
fn ac1() -> Check {
    let pn = labels(&["neg", "pos"]);
    let mut baby = MockSpec::classification("baby", pn.clone(), MockResponse::Fail("unscripted".into()));
    let mama = MockSpec::classification("mama", pn.clone(), MockResponse::Distribution(LabelDistribution::one_hot(pn.clone(), 1).unwrap()));
    let docs: Vec<Document> = (0..50).map(|i| Document::new(format!("d{i:02}"), format!("document number {i}"))).collect();
    let mut conf = HashMap::new();
    for (i, d) in docs.iter().enumerate() {
        let top = 0.52 + (i % 24) as f64 / 50.0;
        let probs = if i % 2 == 0 { vec![top, 1.0 - top] } else { vec![1.0 - top, top] };
        baby.insert_text(&d.text, MockResponse::Distribution(LabelDistribution::new(pn.clone(), probs).unwrap()));
        conf.insert(d.id.clone(), (top, pn[i % 2].clone()));
    }
    let mut thresholds: Vec<f64> = conf.values().map(|(c, _)| *c).collect();
    thresholds.extend(uniform_grid::<f64>(200));
    let mut boundary = 0;
    for &t in &thresholds {
        let cascade = Cascade::new(vec![
            mock_stage(baby.clone(), Some(t), ConfidenceFn::MaxProb, 1.0),
            mock_stage(mama.clone(), None, ConfidenceFn::MaxProb, 100.0),
        ])
        .map_err(|e| e.to_string())?;
        for o in triage_batch(&cascade, &docs).map_err(|e| e.to_string())? {
            let (c, baby_label) = &conf[&o.doc_id];
            boundary += usize::from(*c == t);
            let (stage, label) = if *c > t { (0, baby_label.as_str()) } else { (1, "pos") };
            ensure(o.answering_stage == stage && o.label() == Some(label), || {
                format!("{} with confidence {c} at t={t}: stage {} label {:?}", o.doc_id, o.answering_stage, o.label())
            })?;
        }
    }
    ensure(boundary > 0, || "no boundary case exercised".into())?;
    Ok(format!("{} thresholds x 50 docs, {boundary} boundary cases escalated", thresholds.len()))
}

/// find_threshold equals a plain ascending scan.
fn ac2() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let grid = uniform_grid::<f64>(200);
    let mut shortfalls = 0;
    for k in 0..20 {
        // every fourth curve stays below a floor of 1.0
        let cap = if k % 4 == 0 { 0.98 } else { 1.0 };
        let mut acc: f64 = rng.random_range(0.5..0.9);
        let mut curve: Vec<SweepPoint<f64>> = grid
            .iter()
            .map(|&t| {
                acc = (acc + rng.random_range(-0.03..0.04)).clamp(0.0, cap);
                SweepPoint { threshold: t, accuracy: acc, savings_docs: 1.0 - t, savings_cost: 1.0 - t, stage_counts: vec![] }
            })
            .collect();
        let floor = match k % 4 {
            0 => 1.0,
            1 => curve[rng.random_range(0..curve.len())].accuracy,
            _ => rng.random_range(0.6..0.99),
        };
        let mut expected = (1.0, true);
        for p in &curve {
            if p.accuracy >= floor {
                expected = (p.threshold, false);
                break;
            }
        }
        shortfalls += usize::from(expected.1);
        curve.shuffle(&mut rng);
        let got = find_threshold(&curve, floor).map_err(|e| e.to_string())?;
        ensure((got.threshold, got.shortfall) == expected, || {
            format!("curve {k}: got ({}, {}) expected {expected:?}", got.threshold, got.shortfall)
        })?;
    }
    Ok(format!("20 curves, {shortfalls} shortfalls"))
}

fn papabear_spec(docs: &[Document], rng: &mut ChaCha8Rng) -> MockSpec {
    let topics = topic_labels();
    let mut spec = MockSpec::classification("papabear", topics.clone(), MockResponse::Fail("unscripted".into()));
    for d in docs {
        let gold = topics.iter().position(|t| Some(t) == d.gold_label.as_ref()).unwrap();
        let label = if rng.random_bool(0.9) { gold } else { (gold + 1) % 3 };
        spec.insert_text(&d.text, MockResponse::Distribution(peaked(&topics, label, rng.random_range(0.4..0.95))));
    }
    spec
}

/// Sweep with reused predictions equals naive re-triage at every grid value.
fn ac3() -> Check {
    let synth = synthetic_classification(500, 0.8, 0.98, 3);
    let (train, docs) = synth.docs.split_at(300);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cascade = Cascade::new(vec![
        CascadeStage::new(Arc::new(small_baby(train)), Some(0.6), ConfidenceFn::MaxProb, 1.0),
        mock_stage(papabear_spec(docs, &mut rng), Some(0.7), ConfidenceFn::Margin, 10.0),
        mock_stage(synth.mamabear.clone(), None, ConfidenceFn::MaxProb, 100.0),
    ])
    .map_err(|e| e.to_string())?;
    let gold = gold_references(docs).unwrap();
    let grid = default_grid::<f64>();
    let mut compared = 0;
    for stage in 0..2 {
        let swept = sweep(&cascade, docs, &gold, &grid, stage).map_err(|e| e.to_string())?;
        for (p, &c) in swept.iter().zip(&grid) {
            let outs = triage_batch(&cascade.with_threshold(stage, c).unwrap(), docs).map_err(|e| e.to_string())?;
            let total: usize = outs.iter().map(|o| o.chars).sum();
            let spared: usize = outs.iter().filter(|o| !o.answered_by_final).map(|o| o.chars).sum();
            let mut counts = vec![0; 3];
            for o in &outs {
                counts[o.answering_stage] += 1;
            }
            let naive = SweepPoint {
                threshold: c,
                accuracy: hand_accuracy(&outs, &gold),
                savings_docs: outs.iter().filter(|o| !o.answered_by_final).count() as f64 / outs.len() as f64,
                savings_cost: spared as f64 / total as f64,
                stage_counts: counts,
            };
            ensure(*p == naive, || format!("stage {stage} t={c}: sweep {p:?} naive {naive:?}"))?;
            compared += 1;
        }
    }
    Ok(format!("{compared} sweep points identical on 200 docs"))
}

fn random_distribution(labels: &[String], rng: &mut ChaCha8Rng) -> LabelDistribution<f64> {
    let raw: Vec<f64> = labels.iter().map(|_| rng.random_range(0.01..1.0f64).powi(3)).collect();
    let total: f64 = raw.iter().sum();
    LabelDistribution::new(labels.to_vec(), raw.iter().map(|r| r / total).collect()).unwrap()
}

/// savings_docs never increases with the threshold.
fn ac4() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let grid = default_grid::<f64>();
    let mut checked = 0;
    for c in 0..100 {
        let k = rng.random_range(2..5);
        let names: Vec<String> = (0..k).map(|i| format!("c{i}")).collect();
        let n_stages = rng.random_range(2..4);
        let docs: Vec<Document> = (0..rng.random_range(5..60))
            .map(|i| Document::new(format!("d{i}"), format!("config {c} doc {i}")).with_label(names[rng.random_range(0..k)].clone()))
            .collect();
        let stages: Vec<CascadeStage<f64>> = (0..n_stages)
            .map(|s| {
                let mut spec = MockSpec::classification(format!("s{s}"), names.clone(), MockResponse::Fail("unscripted".into()));
                for d in &docs {
                    spec.insert_text(&d.text, MockResponse::Distribution(random_distribution(&names, &mut rng)));
                }
                let threshold = (s + 1 < n_stages).then(|| rng.random_range(0.0..1.0));
                let conf = ConfidenceFn::ALL[rng.random_range(0..3)];
                mock_stage(spec, threshold, conf, 10f64.powi(s as i32))
            })
            .collect();
        let cascade = Cascade::new(stages).map_err(|e| e.to_string())?;
        let gold = gold_references(&docs).unwrap();
        for stage in 0..n_stages - 1 {
            let curve = sweep(&cascade, &docs, &gold, &grid, stage).map_err(|e| e.to_string())?;
            if let Some(w) = curve.windows(2).find(|w| w[1].savings_docs > w[0].savings_docs) {
                return Err(format!("config {c} stage {stage}: savings rose from {} to {} at t={}", w[0].savings_docs, w[1].savings_docs, w[1].threshold));
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} curves over 100 configs, zero violations"))
}

/// t = 1 reproduces the final stage; t = 0 with max_prob answers everything at stage 0.
fn ac5() -> Check {
    let synth = synthetic_classification(500, 0.8, 0.98, 5);
    let (train, docs) = synth.docs.split_at(200);
    let baby = Arc::new(small_baby(train));
    let gold = gold_references(docs).unwrap();
    let build = |t: f64| {
        Cascade::new(vec![
            CascadeStage::new(baby.clone(), Some(t), ConfidenceFn::MaxProb, 1.0),
            mock_stage(synth.mamabear.clone(), None, ConfidenceFn::MaxProb, 100.0),
        ])
        .unwrap()
    };
    let top = triage_batch(&build(1.0), docs).map_err(|e| e.to_string())?;
    let final_correct = docs
        .iter()
        .filter(|d| synth.mamabear.respond(&d.text).unwrap().distribution().unwrap().argmax_label() == d.gold_label.as_deref().unwrap())
        .count();
    let final_accuracy = final_correct as f64 / docs.len() as f64;
    let acc = hand_accuracy(&top, &gold);
    ensure(acc == final_accuracy, || format!("accuracy at t=1 {acc} vs final stage {final_accuracy}"))?;
    let s1 = savings_docs(&top).map_err(|e| e.to_string())?;
    ensure(s1 == 0.0, || format!("savings at t=1: {s1}"))?;
    let s0 = savings_docs(&triage_batch(&build(0.0), docs).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    ensure(s0 == 1.0, || format!("savings at t=0: {s0}"))?;
    Ok(format!("t=1: accuracy {acc} = final stage, savings 0; t=0: savings 1"))
}

/// Scaled replication: 5,000 synthetic docs, oracle-labeled training, floor 0.9.
fn ac6() -> Check {
    let synth = synthetic_classification(5000, 0.8, 0.98, 6);
    let split = make_split(&synth.docs, SplitRatios::new(0.6, 0.2, 0.2), 6).map_err(|e| e.to_string())?;
    let mama = Arc::new(MockPredictor::<f64>::new(synth.mamabear.clone()));
    let examples = oracle_label(mama.as_ref(), &split.train, 32).map_err(|e| e.to_string())?;
    let texts: HashMap<&str, &str> = split.train.iter().map(|d| (d.id.as_str(), d.text.as_str())).collect();
    let examples: Vec<(String, String)> = examples.into_iter().map(|(id, l)| (texts[id.as_str()].to_string(), l)).collect();
    let baby: BabyModel<f64> = train_baby(&examples, &TrainConfig::default(), "mamabear").map_err(|e| e.to_string())?;
    let cascade = Cascade::new(vec![
        CascadeStage::new(Arc::new(baby), Some(1.0), ConfidenceFn::MaxProb, 1.0),
        CascadeStage::new(mama, None, ConfidenceFn::MaxProb, 100.0),
    ])
    .map_err(|e| e.to_string())?;
    let val_gold = gold_references(&split.validation).unwrap();
    let cal = calibrate_cascade(&cascade, &split.validation, &val_gold, &[Some(0.9)], &default_grid()).map_err(|e| e.to_string())?;
    let t = cal.cascade.thresholds()[0];
    let outs = triage_batch(&cal.cascade, &split.test).map_err(|e| e.to_string())?;
    let acc = hand_accuracy(&outs, &gold_references(&split.test).unwrap());
    let saving = savings_docs(&outs).map_err(|e| e.to_string())?;
    let summary = format!("threshold {t:.3}, test accuracy {acc:.4}, savings_docs {saving:.4}");
    ensure(acc >= 0.88 && saving >= 0.5, || summary.clone())?;
    Ok(summary)
}

fn lexicon_backend(lexicon: &std::collections::BTreeMap<String, String>) -> (Arc<MockPredictor<f64>>, BackendStage<f64>) {
    let m = Arc::new(MockPredictor::new(MockSpec::lexicon("bert", lexicon.clone())));
    (m.clone(), BackendStage { predictor: m, unit_cost: 100.0 })
}

/// A perfect entity gate never skips more than the entity-free share, and
/// skips exactly that share at t = 0.
fn ac7() -> Check {
    let t = synthetic_tagged(250, 0.4, 7);
    let docs = tagged_documents(&t.sentences, 5, "e").map_err(|e| e.to_string())?;
    let gate = perfect_entity_gate(&t.sentences, 7).map_err(|e| e.to_string())?;
    let pipeline = EntityPipeline::entitybear(
        GateStage { predictor: Arc::new(MockPredictor::<f64>::new(gate)), threshold: 0.5, confidence: ConfidenceFn::MaxProb, unit_cost: 1.0 },
        lexicon_backend(&t.lexicon).1,
    )
    .map_err(|e| e.to_string())?;
    let mut sweeper = EntitySweeper::new(&pipeline, &docs).map_err(|e| e.to_string())?;
    let mut at_zero = None;
    for th in uniform_grid::<f64>(200) {
        let outs = sweeper.outcomes(th, 1.0).map_err(|e| e.to_string())?;
        let skipped: usize = outs.iter().map(|o| o.routing.skipped).sum();
        let total: usize = outs.iter().map(|o| o.verdicts.len()).sum();
        let frac = skipped as f64 / total as f64;
        ensure(frac <= 0.4, || format!("skipped {frac} at t={th}"))?;
        if th == 0.0 {
            at_zero = Some(frac);
        }
    }
    ensure(at_zero == Some(0.4), || format!("skipped fraction at t=0: {at_zero:?}"))?;
    Ok("skipped_fraction <= 0.40 on 201 thresholds, = 0.40 at t=0".into())
}

fn sentence_docs(sentences: &[babybear_core::TaggedSentence], prefix: &str) -> Vec<Document> {
    tagged_documents(sentences, 5, prefix).unwrap()
}

/// Trained entity gate calibrated to F1 0.95 keeps F1 >= 0.95 on held-out data.
fn ac8() -> Check {
    let t = synthetic_tagged(3000, 0.4, 8);
    let (train, rest) = t.sentences.split_at(2000);
    let (val, test) = rest.split_at(500);
    let examples = build_entitybear_training(train).map_err(|e| e.to_string())?;
    let gate: BabyModel<f64> = train_baby(&examples, &TrainConfig::default(), "gold tags").map_err(|e| e.to_string())?;
    ensure(gate.labels() == labels(&[NO_ENTITY, WITH_ENTITY]).as_slice(), || format!("gate labels {:?}", gate.labels()))?;
    let pipeline = EntityPipeline::entitybear(
        GateStage { predictor: Arc::new(gate), threshold: 1.0, confidence: ConfidenceFn::MaxProb, unit_cost: 1.0 },
        lexicon_backend(&t.lexicon).1,
    )
    .map_err(|e| e.to_string())?;
    let val_docs = sentence_docs(val, "v");
    let test_docs = sentence_docs(test, "t");
    let val_gold = gold_entity_references(&val_docs).unwrap();
    let cal = calibrate_entity_pipeline(&pipeline, &val_docs, &val_gold, ReferenceKind::Gold, Some(0.95), None, &default_grid())
        .map_err(|e| e.to_string())?;
    let outs = triage_documents(&cal.pipeline, &test_docs).map_err(|e| e.to_string())?;
    let report = make_entity_report(&outs, &gold_entity_references(&test_docs).unwrap(), ReferenceKind::Gold, &cal.pipeline.thresholds())
        .map_err(|e| e.to_string())?;
    let f1 = report.metric.headline();
    let summary = format!("threshold {:.3}, test F1 {f1:.4}, sentences skipped {:.4}", cal.pipeline.thresholds()[0], report.savings_docs);
    ensure(f1 >= 0.95, || summary.clone())?;
    Ok(summary)
}

/// Analytic gradients against central differences on a fixed instance.
fn ac9() -> Check {
    let spec = FeatureSpec::new(1 << 10, (1, 2)).map_err(|e| e.to_string())?;
    let texts = [("cheap fast model", 0), ("slow large model", 1), ("cheap small fast", 0), ("large slow accurate", 2), ("model model fast", 1)];
    let data: Vec<(SparseVector<f64>, usize)> = texts.iter().map(|(t, y)| (featurize(t, &spec), *y)).collect();
    let dim = spec.feature_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let weights: Vec<f64> = (0..3 * dim).map(|_| rng.random_range(-0.3..0.3)).collect();
    let bias = vec![0.05, -0.1, 0.2];
    let l2 = 1e-3;
    let (_, gw, gb) = loss_and_gradient(&weights, &bias, dim, &data, l2);
    let h = 1e-5;
    let rel = |fd: f64, an: f64| (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
    let mut worst: f64 = 0.0;
    let mut active: Vec<usize> = data.iter().flat_map(|(x, _)| x.iter().map(|(j, _)| j)).collect();
    active.sort_unstable();
    active.dedup();
    for k in 0..3 {
        for &j in &active {
            let idx = k * dim + j;
            let (mut plus, mut minus) = (weights.clone(), weights.clone());
            plus[idx] += h;
            minus[idx] -= h;
            let fd = (loss_and_gradient(&plus, &bias, dim, &data, l2).0 - loss_and_gradient(&minus, &bias, dim, &data, l2).0) / (2.0 * h);
            worst = worst.max(rel(fd, gw[idx]));
        }
        let (mut plus, mut minus) = (bias.clone(), bias.clone());
        plus[k] += h;
        minus[k] -= h;
        let fd = (loss_and_gradient(&weights, &plus, dim, &data, l2).0 - loss_and_gradient(&weights, &minus, dim, &data, l2).0) / (2.0 * h);
        worst = worst.max(rel(fd, gb[k]));
    }
    ensure(worst < 1e-4, || format!("worst relative error {worst:e}"))?;
    Ok(format!("{} coordinates, worst relative error {worst:.2e}", 3 * (active.len() + 1)))
}

/// Spans mapped back to document offsets cover the same text the backend marked.
fn ac10() -> Check {
    let pool = synthetic_tagged(300, 0.4, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let ent = labels(&[NO_ENTITY, WITH_ENTITY]);
    let mut gate = MockSpec::classification("gate", ent.clone(), MockResponse::Fail("unscripted".into()));
    for s in &pool.sentences {
        let p_none = rng.random_range(0.0..1.0);
        gate.insert_text(&s.text, MockResponse::Distribution(LabelDistribution::new(ent.clone(), vec![p_none, 1.0 - p_none]).unwrap()));
    }
    let gate_stage = GateStage { predictor: Arc::new(MockPredictor::<f64>::new(gate)), threshold: 0.5, confidence: ConfidenceFn::MaxProb, unit_cost: 1.0 };
    let (mut spans_checked, mut docs_with_skips) = (0, 0);
    for i in 0..100 {
        let n = rng.random_range(2..8);
        let chosen: Vec<_> = (0..n).map(|_| pool.sentences[rng.random_range(0..pool.sentences.len())].clone()).collect();
        let doc = assemble_document(format!("r{i}"), &chosen).map_err(|e| e.to_string())?;
        let (backend, stage) = lexicon_backend(&pool.lexicon);
        let pipeline = EntityPipeline::entitybear(gate_stage.clone(), stage).map_err(|e| e.to_string())?;
        let out = triage_document(&pipeline, &doc).map_err(|e| e.to_string())?;
        docs_with_skips += usize::from(out.routing.skipped > 0);
        let seen = backend.inputs_seen();
        let expected: Vec<(String, String)> = match seen.as_slice() {
            [] => vec![],
            [joined] => {
                let spans = backend.spec().respond(joined).map_err(|e| e.to_string())?;
                spans.entities().unwrap().iter().map(|s| (s.slice(joined).to_string(), s.etype.clone())).collect()
            }
            more => return Err(format!("{}: {} backend calls", doc.id, more.len())),
        };
        let got: Vec<(String, String)> = out.predicted.iter().map(|s| (s.slice(&doc.text).to_string(), s.etype.clone())).collect();
        ensure(got == expected, || format!("{}: remapped {got:?} backend {expected:?}", doc.id))?;
        spans_checked += got.len();
    }
    ensure(docs_with_skips > 0 && spans_checked > 0, || "fixture exercised nothing".into())?;
    Ok(format!("100 docs ({docs_with_skips} with skips), {spans_checked} spans matched"))
}

/// Wire round-trips plus service/library equivalence over HTTP mocks.
fn ac11() -> Check {
    let mut runner = TestRunner::new(ProptestConfig { cases: 256, failure_persistence: None, ..ProptestConfig::default() });
    runner
        .run(&(prop::collection::vec(output(), 0..8), prop::collection::vec(triage_output(), 0..8)), |(predict, triage)| {
            let p = PredictResponse { outputs: predict };
            let back: PredictResponse = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
            prop_assert_eq!(back, p);
            let t = TriageResponse { outputs: triage };
            let back: TriageResponse = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
            prop_assert_eq!(back, t);
            Ok(())
        })
        .map_err(|e| e.to_string())?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let fx = classification_fixture(dir.path(), 100, 11);
    let mama = BackgroundServer::start(mock_router(fx.mamabear.clone()), "127.0.0.1:0").map_err(|e| e.to_string())?;
    let service = BackgroundServer::start(service_router(classification_config(&fx, 0.4, Some(&mama.url()))).map_err(|e| e.to_string())?, "127.0.0.1:0")
        .map_err(|e| e.to_string())?;
    let (status, body) = http_post(&format!("{}/v1/triage", service.url()), &serde_json::to_string(&triage_request(&fx.docs)).unwrap());
    ensure(status == 200, || format!("status {status}: {body}"))?;
    let got: TriageResponse = serde_json::from_str(&body).map_err(|e| e.to_string())?;
    let ActiveCascade::Classification(local) = classification_config(&fx, 0.4, None).build().map_err(|e| e.to_string())? else {
        return Err("expected a classification cascade".into());
    };
    let want = triage_batch(&local, &fx.docs).map_err(|e| e.to_string())?;
    ensure(got.outputs.len() == 100, || format!("{} outputs", got.outputs.len()))?;
    for (g, w) in got.outputs.iter().zip(&want) {
        ensure(
            g.id == w.doc_id && g.label.as_deref() == w.label() && g.answering_stage == w.answering_stage && g.confidence == w.confidence(),
            || format!("service {g:?} library {w:?}"),
        )?;
    }
    let escalated = want.iter().filter(|w| w.answering_stage == 1).count();
    Ok(format!("256 fuzzed round-trips; 100 docs identical over HTTP ({escalated} escalated)"))
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("AC1", "triage fidelity", Duration::from_secs(1), ac1),
        ("AC2", "calibration oracle equivalence", Duration::from_secs(1), ac2),
        ("AC3", "sweep consistency", Duration::from_secs(10), ac3),
        ("AC4", "savings monotonicity", Duration::from_secs(10), ac4),
        ("AC5", "boundary identities", Duration::from_secs(1), ac5),
        ("AC6", "synthetic replication", Duration::from_secs(120), ac6),
        ("AC7", "entity-gate upper bound", Duration::from_secs(10), ac7),
        ("AC8", "entity F1 floor", Duration::from_secs(60), ac8),
        ("AC9", "gradient check", Duration::from_secs(1), ac9),
        ("AC10", "offset remapping", Duration::from_secs(10), ac10),
        ("AC11", "protocol round-trip and service equivalence", Duration::from_secs(30), ac11),
    ];
    let mut failed = 0;
    for (id, name, budget, check) in criteria {
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = started.elapsed();
        let result = match result {
            Ok(detail) if elapsed > budget => Err(format!("{detail}; exceeded the {}s budget", budget.as_secs())),
            other => other,
        };
        match result {
            Ok(detail) => println!("[PASS] {id} {name}: {detail} ({:.2}s)", elapsed.as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("[FAIL] {id} {name}: {why} ({:.2}s)", elapsed.as_secs_f64());
            }
        }
    }
    println!("{} of 11 criteria passed", 11 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
