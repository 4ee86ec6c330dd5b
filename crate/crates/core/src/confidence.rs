//! Confidence functions: scalar summaries in `[0, 1]` of a label
//! distribution, compared against a stage threshold.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::model::LabelDistribution;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceFn {
    #[default]
    MaxProb,
    Margin,
    Entropy,
}

impl ConfidenceFn {
    pub const ALL: [ConfidenceFn; 3] = [ConfidenceFn::MaxProb, ConfidenceFn::Margin, ConfidenceFn::Entropy];

    pub fn name(self) -> &'static str {
        match self {
            ConfidenceFn::MaxProb => "max_prob",
            ConfidenceFn::Margin => "margin",
            ConfidenceFn::Entropy => "entropy",
        }
    }

    pub fn apply<S: Scalar>(self, d: &LabelDistribution<S>) -> S {
        match self {
            ConfidenceFn::MaxProb => max_prob(d),
            ConfidenceFn::Margin => margin(d),
            ConfidenceFn::Entropy => entropy_conf(d),
        }
    }
}

impl fmt::Display for ConfidenceFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown confidence function {0:?} (expected max_prob, margin or entropy)")]
pub struct UnknownConfidenceFn(pub String);

impl FromStr for ConfidenceFn {
    type Err = UnknownConfidenceFn;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ConfidenceFn::ALL.into_iter().find(|c| c.name() == s).ok_or_else(|| UnknownConfidenceFn(s.to_string()))
    }
}

fn clamp01<S: Scalar>(x: S) -> S {
    x.max(S::zero()).min(S::one())
}

/// Largest probability.
pub fn max_prob<S: Scalar>(d: &LabelDistribution<S>) -> S {
    clamp01(d.probs()[d.argmax()])
}

/// Top probability minus the runner-up; `1` for a single label.
pub fn margin<S: Scalar>(d: &LabelDistribution<S>) -> S {
    let mut top = S::neg_infinity();
    let mut second = S::neg_infinity();
    for &p in d.probs() {
        if p > top {
            second = top;
            top = p;
        } else if p > second {
            second = p;
        }
    }
    if d.len() < 2 {
        return S::one();
    }
    clamp01(top - second)
}

/// `1 - H(d) / ln K` with natural-log entropy and `0 ln 0 = 0`; `1` for a single label.
pub fn entropy_conf<S: Scalar>(d: &LabelDistribution<S>) -> S {
    if d.len() < 2 {
        return S::one();
    }
    let h: S = d
        .probs()
        .iter()
        .filter(|&&p| p > S::zero())
        .map(|&p| -p * p.ln())
        .sum();
    clamp01(S::one() - h / S::from_count(d.len()).ln())
}
