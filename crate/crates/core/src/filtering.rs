//! Post-decoding filters: maximum token-score thresholding and a learned
//! accept/reject classifier over fixed-length score vectors.

use crate::corpus::PromptRecord;
use crate::decoding::Hypothesis;
use crate::error::{Error, Result};
use crate::gbdt::GbdtModel;
use crate::metrics::NormalizeConfig;
use crate::predictions::{matches_gold, ScoredPrediction};

pub const DEFAULT_THRESHOLD: f64 = -3.5;
pub const DEFAULT_FEATURE_LEN: usize = 11;

/// Anything carrying per-token log-probabilities.
pub trait TokenScored {
    fn token_logprobs(&self) -> &[f64];

    /// `-inf` for an empty score list.
    fn max_token_logprob(&self) -> f64 {
        self.token_logprobs().iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

impl TokenScored for Hypothesis {
    fn token_logprobs(&self) -> &[f64] {
        &self.token_logprobs
    }
}

impl TokenScored for ScoredPrediction {
    fn token_logprobs(&self) -> &[f64] {
        self.token_logprobs.as_deref().unwrap_or(&[])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdConfig {
    pub min_max_token_logprob: f64,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        ThresholdConfig {
            min_max_token_logprob: DEFAULT_THRESHOLD,
        }
    }
}

pub fn keeps<P: TokenScored>(item: &P, config: &ThresholdConfig) -> bool {
    let m = item.max_token_logprob();
    m > f64::NEG_INFINITY && m >= config.min_max_token_logprob
}

/// Keeps hypotheses whose largest token log-probability reaches the threshold.
pub fn threshold_filter<P: TokenScored + Clone>(items: &[P], config: &ThresholdConfig) -> Vec<P> {
    items.iter().filter(|h| keeps(*h, config)).cloned().collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureConfig {
    pub len: usize,
    pub pad_value: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            len: DEFAULT_FEATURE_LEN,
            pad_value: 0.0,
        }
    }
}

/// First `f` token scores, right-padded with 0.0.
pub fn featurize<P: TokenScored>(item: &P, f: usize) -> FeatureVector {
    featurize_with(
        item,
        &FeatureConfig {
            len: f,
            pad_value: 0.0,
        },
    )
}

pub fn featurize_with<P: TokenScored>(item: &P, config: &FeatureConfig) -> FeatureVector {
    let mut values: Vec<f64> = item.token_logprobs().iter().take(config.len).copied().collect();
    values.resize(config.len, config.pad_value);
    FeatureVector { values }
}

/// Features and exact-match labels for one prompt's predictions.
pub fn label_predictions(
    predictions: &[ScoredPrediction],
    gold: &PromptRecord,
    norm: &NormalizeConfig,
    features: &FeatureConfig,
) -> Vec<(FeatureVector, bool)> {
    predictions
        .iter()
        .map(|p| (featurize_with(p, features), matches_gold(&p.text, gold, norm)))
        .collect()
}

/// Keeps items whose accept probability is at least `decision_threshold`.
pub fn model_filter<P: TokenScored + Clone>(
    items: &[P],
    model: &GbdtModel,
    features: &FeatureConfig,
    decision_threshold: f64,
) -> Result<Vec<P>> {
    if model.n_features != features.len {
        return Err(Error::ShapeMismatch {
            expected: features.len,
            got: model.n_features,
        });
    }
    let mut out = Vec::new();
    for it in items {
        if model.predict_proba(&featurize_with(it, features).values)? >= decision_threshold {
            out.push(it.clone());
        }
    }
    Ok(out)
}
