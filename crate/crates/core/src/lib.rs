//! Inference triage: answer each input with the cheapest model whose
//! confidence clears its threshold, escalating the rest.
//!
//! The library is generic over the floating-point type (`f32` or `f64`);
//! the aliases below fix it for the common cases.

pub mod accounting;
pub mod calibrate;
pub mod confidence;
pub mod corpus;
pub mod entity;
pub mod mock;
pub mod model;
pub mod scalar;
pub mod synth;
pub mod triage;

pub use confidence::ConfidenceFn;
pub use corpus::{Document, EntitySpan, TaggedSentence};
pub use model::{BabyModel, LabelDistribution, Prediction, Predictor, PredictorError, TaskKind};
pub use scalar::Scalar;
pub use triage::{Cascade, CascadeStage, TriageOutcome};

pub type Cascade64 = triage::Cascade<f64>;
pub type Cascade32 = triage::Cascade<f32>;
pub type BabyModel64 = model::BabyModel<f64>;
pub type BabyModel32 = model::BabyModel<f32>;
pub type Distribution64 = model::LabelDistribution<f64>;
pub type Distribution32 = model::LabelDistribution<f32>;
pub type Outcome64 = triage::TriageOutcome<f64>;
pub type Outcome32 = triage::TriageOutcome<f32>;
pub type RunReport64 = accounting::RunReport<f64>;
pub type RunReport32 = accounting::RunReport<f32>;
pub type EntityPipeline64 = entity::EntityPipeline<f64>;
pub type EntityPipeline32 = entity::EntityPipeline<f32>;
