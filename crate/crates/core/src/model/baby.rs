//! Multinomial logistic regression over hashed n-grams.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::features::{featurize, FeatureSpec, SparseVector, HASH_NAME, HASH_SEED};
use super::{softmax, LabelDistribution, Prediction, Predictor, PredictorError, TaskKind};
use crate::scalar::Scalar;

pub const MODEL_FORMAT_VERSION: u32 = 1;
const MANIFEST_FILE: &str = "model.json";
const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("need at least 10 examples, got {0}")]
    TooFewExamples(usize),
    #[error("need at least 2 distinct labels, got {0:?}")]
    SingleLabel(Vec<String>),
    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("invalid model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
    pub seed: u64,
    pub feature_dim: usize,
    pub ngram_range: (usize, usize),
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            epochs: 20,
            l2: 1e-5,
            seed: 0,
            feature_dim: 1 << 18,
            ngram_range: (1, 2),
            batch_size: 32,
        }
    }
}

impl TrainConfig {
    pub fn feature_spec(&self) -> Result<FeatureSpec, TrainError> {
        FeatureSpec::new(self.feature_dim, self.ngram_range).map_err(TrainError::Config)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(TrainError::Config(format!("learning_rate must be in (0, 1], got {}", self.learning_rate)));
        }
        if !(1..=10_000).contains(&self.epochs) {
            return Err(TrainError::Config(format!("epochs must be in 1..=10000, got {}", self.epochs)));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(TrainError::Config(format!("l2 must be nonnegative, got {}", self.l2)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        self.feature_spec().map(|_| ())
    }
}

/// Trained classifier. Immutable after training.
#[derive(Debug, Clone, PartialEq)]
pub struct BabyModel<S> {
    id: String,
    label_set: Vec<String>,
    features: FeatureSpec,
    /// Row-major `|labels| x feature_dim`.
    weights: Vec<S>,
    bias: Vec<S>,
    trained_on: String,
    config: TrainConfig,
    loss_history: Vec<f64>,
}

/// Persisted next to the dense weight blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format_version: u32,
    pub id: String,
    pub scalar: String,
    pub label_set: Vec<String>,
    pub feature_dim: usize,
    pub ngram_range: (usize, usize),
    pub hash: String,
    pub hash_seed: u64,
    pub trained_on: String,
    pub train_config: TrainConfig,
    pub loss_history: Vec<f64>,
}

impl<S: Scalar> BabyModel<S> {
    /// Model with explicit parameters, e.g. all zeros for a uniform predictor.
    pub fn from_parts(
        label_set: Vec<String>,
        features: FeatureSpec,
        weights: Vec<S>,
        bias: Vec<S>,
    ) -> Result<Self, TrainError> {
        let k = label_set.len();
        if k == 0 || weights.len() != k * features.feature_dim() || bias.len() != k {
            return Err(TrainError::Format("parameter shapes do not match the label set".into()));
        }
        if weights.iter().chain(&bias).any(|w| !w.is_finite()) {
            return Err(TrainError::Format("non-finite parameter".into()));
        }
        let config = TrainConfig { feature_dim: features.feature_dim(), ngram_range: features.ngram_range(), ..TrainConfig::default() };
        Ok(BabyModel {
            id: "babybear".into(),
            label_set,
            features,
            weights,
            bias,
            trained_on: String::new(),
            config,
            loss_history: Vec::new(),
        })
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn labels(&self) -> &[String] {
        &self.label_set
    }

    pub fn feature_spec(&self) -> &FeatureSpec {
        &self.features
    }

    pub fn weights(&self) -> &[S] {
        &self.weights
    }

    pub fn bias(&self) -> &[S] {
        &self.bias
    }

    pub fn trained_on(&self) -> &str {
        &self.trained_on
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Objective value after each epoch, starting with the untrained model.
    pub fn loss_history(&self) -> &[f64] {
        &self.loss_history
    }

    fn logits(&self, x: &SparseVector<S>) -> Vec<S> {
        logits(&self.weights, &self.bias, self.features.feature_dim(), S::one(), x)
    }

    /// Softmax of `weights . featurize(text) + bias`.
    pub fn predict_text(&self, text: &str) -> LabelDistribution<S> {
        let x = featurize(text, &self.features);
        LabelDistribution::softmax(self.label_set.clone(), &self.logits(&x))
            .expect("softmax of finite logits is a distribution")
    }

    pub fn manifest(&self) -> ModelManifest {
        ModelManifest {
            format_version: MODEL_FORMAT_VERSION,
            id: self.id.clone(),
            scalar: S::NAME.into(),
            label_set: self.label_set.clone(),
            feature_dim: self.features.feature_dim(),
            ngram_range: self.features.ngram_range(),
            hash: HASH_NAME.into(),
            hash_seed: HASH_SEED,
            trained_on: self.trained_on.clone(),
            train_config: self.config.clone(),
            loss_history: self.loss_history.clone(),
        }
    }

    /// Writes `model.json` and `weights.bin` (weights then bias, little endian).
    pub fn save(&self, dir: &Path) -> Result<(), TrainError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&self.manifest())?)?;
        let mut blob = Vec::with_capacity((self.weights.len() + self.bias.len()) * S::BYTES);
        for &w in self.weights.iter().chain(&self.bias) {
            w.write_le(&mut blob);
        }
        fs::write(dir.join(WEIGHTS_FILE), blob)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, TrainError> {
        let manifest: ModelManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
        if manifest.format_version != MODEL_FORMAT_VERSION {
            return Err(TrainError::Format(format!(
                "manifest version {}, expected {MODEL_FORMAT_VERSION}",
                manifest.format_version
            )));
        }
        if manifest.scalar != S::NAME {
            return Err(TrainError::Format(format!("weights stored as {}, loading as {}", manifest.scalar, S::NAME)));
        }
        if manifest.hash != HASH_NAME || manifest.hash_seed != HASH_SEED {
            return Err(TrainError::Format(format!("unsupported feature hash {} seed {:#x}", manifest.hash, manifest.hash_seed)));
        }
        let features = FeatureSpec::new(manifest.feature_dim, manifest.ngram_range).map_err(TrainError::Format)?;
        let k = manifest.label_set.len();
        let n_weights = k * features.feature_dim();
        let blob = fs::read(dir.join(WEIGHTS_FILE))?;
        if blob.len() != (n_weights + k) * S::BYTES {
            return Err(TrainError::Format(format!(
                "weight blob has {} bytes, expected {}",
                blob.len(),
                (n_weights + k) * S::BYTES
            )));
        }
        let mut values: Vec<S> = blob.chunks_exact(S::BYTES).map(S::read_le).collect();
        let bias = values.split_off(n_weights);
        let mut model = BabyModel::from_parts(manifest.label_set, features, values, bias)?;
        model.id = manifest.id;
        model.trained_on = manifest.trained_on;
        model.config = manifest.train_config;
        model.loss_history = manifest.loss_history;
        Ok(model)
    }
}

impl<S: Scalar> Predictor<S> for BabyModel<S> {
    fn id(&self) -> &str {
        &self.id
    }

    fn kind(&self) -> TaskKind {
        TaskKind::Classification
    }

    fn label_set(&self) -> &[String] {
        &self.label_set
    }

    fn predict_batch(&self, texts: &[&str]) -> Result<Vec<Prediction<S>>, PredictorError> {
        Ok(texts.iter().map(|t| Prediction::Distribution(self.predict_text(t))).collect())
    }
}

/// `scale * W . x + b` for row-major `W`.
fn logits<S: Scalar>(weights: &[S], bias: &[S], dim: usize, scale: S, x: &SparseVector<S>) -> Vec<S> {
    bias.iter()
        .enumerate()
        .map(|(k, &b)| {
            let row = &weights[k * dim..(k + 1) * dim];
            b + scale * x.iter().map(|(j, v)| row[j] * v).sum::<S>()
        })
        .collect()
}

/// Softmax output minus the one-hot target, and the example's cross-entropy.
fn residual<S: Scalar>(weights: &[S], bias: &[S], dim: usize, scale: S, x: &SparseVector<S>, y: usize) -> (Vec<S>, S) {
    let z = logits(weights, bias, dim, scale, x);
    let max = z.iter().copied().fold(S::neg_infinity(), S::max);
    let log_norm = max + z.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
    let loss = log_norm - z[y];
    let mut r = softmax(&z);
    r[y] = r[y] - S::one();
    (r, loss)
}

/// Mean cross-entropy plus `l2 / 2 * ||W||^2`, with dense gradients
/// for the weights (row-major) and bias.
pub fn loss_and_gradient<S: Scalar>(
    weights: &[S],
    bias: &[S],
    dim: usize,
    examples: &[(SparseVector<S>, usize)],
    l2: S,
) -> (S, Vec<S>, Vec<S>) {
    let n = S::from_count(examples.len());
    let mut grad_w: Vec<S> = weights.iter().map(|&w| l2 * w).collect();
    let mut grad_b = vec![S::zero(); bias.len()];
    let mut loss = S::zero();
    for (x, y) in examples {
        let (r, l) = residual(weights, bias, dim, S::one(), x, *y);
        loss = loss + l / n;
        for (k, &rk) in r.iter().enumerate() {
            grad_b[k] = grad_b[k] + rk / n;
            for (j, v) in x.iter() {
                grad_w[k * dim + j] = grad_w[k * dim + j] + rk * v / n;
            }
        }
    }
    let penalty = weights.iter().map(|&w| w * w).sum::<S>() * l2 / S::lit(2.0);
    (loss + penalty, grad_w, grad_b)
}

/// Fits the baby model on `(text, label)` pairs by mini-batch gradient
/// descent. Labels are sorted to fix the label order.
///
/// L2 decay is applied lazily through a global weight scale so each step
/// only touches the features present in the batch.
pub fn train_baby<S: Scalar>(
    examples: &[(String, String)],
    cfg: &TrainConfig,
    trained_on: &str,
) -> Result<BabyModel<S>, TrainError> {
    cfg.validate()?;
    let spec = cfg.feature_spec()?;
    if examples.len() < 10 {
        return Err(TrainError::TooFewExamples(examples.len()));
    }
    let label_set: Vec<String> = examples.iter().map(|(_, l)| l.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    if label_set.len() < 2 {
        return Err(TrainError::SingleLabel(label_set));
    }
    let data: Vec<(SparseVector<S>, usize)> = examples
        .iter()
        .map(|(t, l)| (featurize(t, &spec), label_set.binary_search(l).expect("label in set")))
        .collect();

    let k = label_set.len();
    let dim = spec.feature_dim();
    let lr = S::lit(cfg.learning_rate);
    let l2 = S::lit(cfg.l2);
    let decay = S::one() - lr * l2;
    let mut weights = vec![S::zero(); k * dim];
    let mut bias = vec![S::zero(); k];
    let mut scale = S::one();

    let objective = |weights: &[S], bias: &[S], scale: S| -> S {
        let n = S::from_count(data.len());
        let ce = data.iter().map(|(x, y)| residual(weights, bias, dim, scale, x, *y).1).sum::<S>() / n;
        ce + l2 / S::lit(2.0) * scale * scale * weights.iter().map(|&w| w * w).sum::<S>()
    };

    let mut history = vec![objective(&weights, &bias, scale).as_f64()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let step = lr / S::from_count(batch.len());
            let residuals: Vec<Vec<S>> =
                batch.iter().map(|&i| residual(&weights, &bias, dim, scale, &data[i].0, data[i].1).0).collect();
            scale = scale * decay;
            if scale < S::lit(1e-6) {
                weights.iter_mut().for_each(|w| *w = *w * scale);
                scale = S::one();
            }
            for (&i, r) in batch.iter().zip(&residuals) {
                for (kk, &rk) in r.iter().enumerate() {
                    bias[kk] = bias[kk] - step * rk;
                    let row = &mut weights[kk * dim..(kk + 1) * dim];
                    for (j, v) in data[i].0.iter() {
                        row[j] = row[j] - step * rk * v / scale;
                    }
                }
            }
        }
        let loss = objective(&weights, &bias, scale);
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch });
        }
        history.push(loss.as_f64());
    }
    weights.iter_mut().for_each(|w| *w = *w * scale);

    let mut model = BabyModel::from_parts(label_set, spec, weights, bias)?;
    model.trained_on = trained_on.to_string();
    model.config = cfg.clone();
    model.loss_history = history;
    Ok(model)
}
