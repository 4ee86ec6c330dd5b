//! Cascade config files: stages with their thresholds, costs and the
//! source of each predictor.
//!
//! ```json
//! {"task": "classification", "batch_size": 32, "stages": [
//!   {"id": "baby", "threshold": 0.8, "unit_cost": 1, "source": {"model": "baby_model"}},
//!   {"id": "mama", "unit_cost": 100, "source": {"backend": {"id": "mama", "endpoint": "http://127.0.0.1:8081",
//!     "kind": "classification", "label_set": ["neg", "pos"]}}}]}
//! ```
//!
//! Entity-recognition configs have 2 or 3 stages: a no-entity/with-entity
//! classifier with a threshold, optionally a distilled recognizer whose
//! `gate` picks the sentences it handles, and the full recognizer.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use babybear_core::confidence::ConfidenceFn;
use babybear_core::entity::{BackendStage, DistilStage, EntityPipeline, GateStage};
use babybear_core::mock::{MockPredictor, MockSpec};
use babybear_core::model::{BabyModel, Predictor, TaskKind};
use babybear_core::triage::{Cascade, CascadeSettings, CascadeStage, ConfigError, StageSettings, DEFAULT_BATCH_SIZE};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendDescriptor, HttpBackend};

pub const BIND_ENV: &str = "BABYBEAR_BIND";
pub const DEFAULT_BIND: &str = "127.0.0.1:8080";

/// `BABYBEAR_BACKEND_<ID>_URL`, with the id uppercased and every
/// non-alphanumeric character replaced by `_`.
pub fn backend_url_env(id: &str) -> String {
    let id: String = id.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_uppercase() } else { '_' }).collect();
    format!("BABYBEAR_BACKEND_{id}_URL")
}

#[derive(Debug, Error)]
pub enum ConfigFileError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse {path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error(transparent)]
    Invalid(#[from] ConfigError),
    #[error(transparent)]
    Confidence(#[from] babybear_core::confidence::UnknownConfidenceFn),
    #[error("stage {stage} ({id}): {message}")]
    Source { stage: usize, id: String, message: String },
}

impl ConfigFileError {
    /// Whether the error lies in the config itself rather than the environment.
    pub fn is_validation(&self) -> bool {
        matches!(self, ConfigFileError::Parse { .. } | ConfigFileError::Invalid(_) | ConfigFileError::Confidence(_) | ConfigFileError::Source { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum StageSource {
    /// Directory holding a saved baby model.
    Model(PathBuf),
    Backend(BackendDescriptor),
    /// In-process mock; handy for demos and tests.
    Mock(MockSpec),
}

fn default_confidence() -> String {
    ConfidenceFn::default().name().to_string()
}

fn default_batch_size() -> usize {
    DEFAULT_BATCH_SIZE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateConfig {
    pub threshold: f64,
    #[serde(default = "default_confidence")]
    pub confidence: String,
    pub unit_cost: f64,
    pub source: StageSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default = "default_confidence")]
    pub confidence: String,
    pub unit_cost: f64,
    pub source: StageSource,
    /// Entity pipelines only: the classifier choosing this stage's sentences.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate: Option<GateConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CascadeConfig {
    pub task: TaskKind,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub stages: Vec<StageConfig>,
}

/// A built cascade ready to triage.
#[derive(Clone, Debug)]
pub enum ActiveCascade {
    Classification(Cascade<f64>),
    Entity(EntityPipeline<f64>),
}

impl ActiveCascade {
    pub fn task(&self) -> TaskKind {
        match self {
            ActiveCascade::Classification(_) => TaskKind::Classification,
            ActiveCascade::Entity(_) => TaskKind::EntityRecognition,
        }
    }
}

impl CascadeConfig {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Reads `path`, resolves model directories relative to it and applies
    /// backend URL overrides from the environment.
    pub fn load(path: &Path) -> Result<Self, ConfigFileError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigFileError::Io { path: path.into(), source })?;
        let mut cfg = Self::from_json(&text).map_err(|source| ConfigFileError::Parse { path: path.into(), source })?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        cfg.apply_env(|k| std::env::var(k).ok());
        cfg.validate()?;
        Ok(cfg)
    }

    fn sources_mut(&mut self) -> impl Iterator<Item = (&str, &mut StageSource)> {
        self.stages.iter_mut().flat_map(|s| {
            let id = s.id.as_str();
            std::iter::once((id, &mut s.source)).chain(s.gate.as_mut().map(|g| (id, &mut g.source)))
        })
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for (_, src) in self.sources_mut() {
            if let StageSource::Model(p) = src {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
    }

    /// Replaces backend endpoints named by `BABYBEAR_BACKEND_<ID>_URL`,
    /// where `<ID>` is the descriptor's id.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        for (_, src) in self.sources_mut() {
            if let StageSource::Backend(d) = src {
                if let Some(url) = lookup(&backend_url_env(&d.id)) {
                    d.endpoint = url;
                }
            }
        }
    }

    /// The library-level settings of a classification cascade.
    pub fn settings(&self) -> CascadeSettings<f64> {
        CascadeSettings {
            task: self.task,
            batch_size: self.batch_size,
            stages: self
                .stages
                .iter()
                .map(|s| StageSettings { id: s.id.clone(), threshold: s.threshold, confidence: s.confidence.clone(), unit_cost: s.unit_cost })
                .collect(),
        }
    }

    /// Static checks; building adds the checks that need the predictors.
    pub fn validate(&self) -> Result<(), ConfigError> {
        match self.task {
            TaskKind::Classification => {
                self.settings().validate()?;
                match self.stages.iter().position(|s| s.gate.is_some()) {
                    Some(i) => Err(ConfigError::UnexpectedGate(i)),
                    None => Ok(()),
                }
            }
            TaskKind::EntityRecognition => self.validate_entity(),
        }
    }

    fn validate_entity(&self) -> Result<(), ConfigError> {
        let n = self.stages.len();
        if !(2..=3).contains(&n) {
            return Err(ConfigError::Invalid(format!("an entity pipeline has 2 or 3 stages, got {n}")));
        }
        if self.batch_size == 0 {
            return Err(ConfigError::Invalid("batch_size must be positive".into()));
        }
        let check_t = |stage: usize, t: f64| {
            if (0.0..=1.0).contains(&t) {
                Ok(())
            } else {
                Err(ConfigError::ThresholdRange { stage, value: t })
            }
        };
        let check_cost = |stage: usize, c: f64| {
            if c >= 0.0 && c.is_finite() {
                Ok(())
            } else {
                Err(ConfigError::BadCost { stage, value: c })
            }
        };
        let mut ids = std::collections::HashSet::new();
        for (i, s) in self.stages.iter().enumerate() {
            if !ids.insert(s.id.as_str()) {
                return Err(ConfigError::DuplicateId(s.id.clone()));
            }
            s.confidence.parse::<ConfidenceFn>()?;
            check_cost(i, s.unit_cost)?;
            if i > 0 && s.unit_cost <= self.stages[i - 1].unit_cost {
                return Err(ConfigError::CostNotIncreasing(i));
            }
            let first = i == 0;
            let last = i + 1 == n;
            match (first, last, s.threshold, &s.gate) {
                (true, _, None, _) => return Err(ConfigError::MissingThreshold(0)),
                (true, _, Some(t), None) => check_t(0, t)?,
                (_, true, Some(_), _) => return Err(ConfigError::FinalThreshold),
                (_, true, None, None) => {}
                (false, false, None, Some(g)) => {
                    check_t(i, g.threshold)?;
                    check_cost(i, g.unit_cost)?;
                    g.confidence.parse::<ConfidenceFn>()?;
                }
                (false, false, None, None) => {
                    return Err(ConfigError::Invalid(format!("stage {i} is a distilled recognizer and needs a gate")))
                }
                (false, false, Some(_), _) => {
                    return Err(ConfigError::Invalid(format!("stage {i} takes its threshold from its gate")))
                }
                (_, _, _, Some(_)) => return Err(ConfigError::UnexpectedGate(i)),
            }
        }
        Ok(())
    }

    /// Copy with the threshold of stage `stage` replaced (the gate's, for a
    /// distilled entity stage).
    pub fn with_threshold(&self, stage: usize, threshold: f64) -> Result<Self, ConfigError> {
        let mut next = self.clone();
        let s = next.stages.get_mut(stage).ok_or_else(|| ConfigError::Invalid(format!("no stage {stage}")))?;
        match s.gate.as_mut() {
            Some(g) => g.threshold = threshold,
            None => s.threshold = Some(threshold),
        }
        next.validate()?;
        Ok(next)
    }

    /// Thresholds of the tunable stages, in order.
    pub fn thresholds(&self) -> Vec<f64> {
        self.stages.iter().filter_map(|s| s.threshold.or(s.gate.as_ref().map(|g| g.threshold))).collect()
    }

    pub fn build(&self) -> Result<ActiveCascade, ConfigFileError> {
        self.validate()?;
        match self.task {
            TaskKind::Classification => {
                let stages = self
                    .stages
                    .iter()
                    .enumerate()
                    .map(|(i, s)| {
                        Ok(CascadeStage::new(
                            build_source(i, &s.id, &s.source)?,
                            s.threshold,
                            s.confidence.parse()?,
                            s.unit_cost,
                        ))
                    })
                    .collect::<Result<Vec<_>, ConfigFileError>>()?;
                Ok(ActiveCascade::Classification(Cascade::with_batch_size(stages, self.batch_size)?))
            }
            TaskKind::EntityRecognition => {
                let n = self.stages.len();
                let first = &self.stages[0];
                let entity_gate = GateStage {
                    predictor: build_source(0, &first.id, &first.source)?,
                    threshold: first.threshold.expect("validated"),
                    confidence: first.confidence.parse()?,
                    unit_cost: first.unit_cost,
                };
                let last = &self.stages[n - 1];
                let full = BackendStage { predictor: build_source(n - 1, &last.id, &last.source)?, unit_cost: last.unit_cost };
                let distil = match n {
                    3 => {
                        let mid = &self.stages[1];
                        let g = mid.gate.as_ref().expect("validated");
                        Some(DistilStage {
                            gate: GateStage {
                                predictor: build_source(1, &format!("{}-gate", mid.id), &g.source)?,
                                threshold: g.threshold,
                                confidence: g.confidence.parse()?,
                                unit_cost: g.unit_cost,
                            },
                            backend: BackendStage { predictor: build_source(1, &mid.id, &mid.source)?, unit_cost: mid.unit_cost },
                        })
                    }
                    _ => None,
                };
                let pipeline = EntityPipeline { entity_gate, distil, full, batch_size: self.batch_size };
                pipeline.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
                Ok(ActiveCascade::Entity(pipeline))
            }
        }
    }
}

fn build_source(stage: usize, id: &str, source: &StageSource) -> Result<Arc<dyn Predictor<f64>>, ConfigFileError> {
    let err = |message: String| ConfigFileError::Source { stage, id: id.into(), message };
    Ok(match source {
        StageSource::Model(dir) => Arc::new(
            BabyModel::<f64>::load(dir).map_err(|e| err(format!("cannot load model from {}: {e}", dir.display())))?.with_id(id),
        ),
        StageSource::Backend(d) => Arc::new(HttpBackend::new(BackendDescriptor { id: id.into(), ..d.clone() }).map_err(err)?),
        StageSource::Mock(spec) => {
            let spec = MockSpec { id: id.into(), ..spec.clone() };
            spec.validate().map_err(err)?;
            Arc::new(MockPredictor::<f64>::new(spec))
        }
    })
}
