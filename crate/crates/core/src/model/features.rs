//! Hashed bag-of-n-grams text features.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use xxhash_rust::xxh64::xxh64;

use crate::scalar::Scalar;

/// Seed of the xxHash64 feature hash. Changing it invalidates every saved model.
pub const HASH_SEED: u64 = 0x6261_6279_6265_6172;
pub const HASH_NAME: &str = "xxh64";
pub const MIN_FEATURE_DIM: usize = 1 << 10;
pub const MAX_NGRAM: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawFeatureSpec")]
pub struct FeatureSpec {
    feature_dim: usize,
    ngram_range: (usize, usize),
}

#[derive(Deserialize)]
struct RawFeatureSpec {
    feature_dim: usize,
    ngram_range: (usize, usize),
}

impl TryFrom<RawFeatureSpec> for FeatureSpec {
    type Error = String;

    fn try_from(r: RawFeatureSpec) -> Result<Self, String> {
        FeatureSpec::new(r.feature_dim, r.ngram_range)
    }
}

impl FeatureSpec {
    pub fn new(feature_dim: usize, ngram_range: (usize, usize)) -> Result<Self, String> {
        if !feature_dim.is_power_of_two() || feature_dim < MIN_FEATURE_DIM || feature_dim > u32::MAX as usize {
            return Err(format!("feature_dim must be a power of two >= {MIN_FEATURE_DIM}, got {feature_dim}"));
        }
        let (lo, hi) = ngram_range;
        if !(1 <= lo && lo <= hi && hi <= MAX_NGRAM) {
            return Err(format!("ngram_range must satisfy 1 <= low <= high <= {MAX_NGRAM}, got ({lo}, {hi})"));
        }
        Ok(FeatureSpec { feature_dim, ngram_range })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn ngram_range(&self) -> (usize, usize) {
        self.ngram_range
    }
}

/// Sorted, duplicate-free sparse vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseVector<S> {
    pub indices: Vec<u32>,
    pub values: Vec<S>,
}

impl<S: Scalar> SparseVector<S> {
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, S)> + '_ {
        self.indices.iter().map(|&i| i as usize).zip(self.values.iter().copied())
    }

    pub fn norm(&self) -> S {
        self.values.iter().map(|&v| v * v).sum::<S>().sqrt()
    }
}

/// Lowercased runs of alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Counts of hashed word n-grams, L2-normalized. Empty text gives the zero vector.
pub fn featurize<S: Scalar>(text: &str, spec: &FeatureSpec) -> SparseVector<S> {
    let tokens = tokenize(text);
    let mask = (spec.feature_dim - 1) as u64;
    let (lo, hi) = spec.ngram_range;
    let mut counts: BTreeMap<u32, u32> = BTreeMap::new();
    let mut key = String::new();
    for n in lo..=hi {
        for gram in tokens.windows(n) {
            key.clear();
            for (i, tok) in gram.iter().enumerate() {
                if i > 0 {
                    key.push(' ');
                }
                key.push_str(tok);
            }
            let idx = (xxh64(key.as_bytes(), HASH_SEED) & mask) as u32;
            *counts.entry(idx).or_default() += 1;
        }
    }
    let norm = counts.values().map(|&c| (c as f64) * (c as f64)).sum::<f64>().sqrt();
    let (indices, values) = counts
        .into_iter()
        .map(|(i, c)| (i, S::lit(c as f64 / norm)))
        .unzip();
    SparseVector { indices, values }
}
