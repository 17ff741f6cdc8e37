//! Margin-ranking training of the linear pair scorer.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::{pair_features, PairFeatures, FEATURE_COUNT};
use crate::corpus::{Pool, Triplet};
use crate::normalize::{normalize_function, NormalizeConfig};
use crate::{Error, Result};

/// `max(0, -(y_pos - y_neg) + m)`.
pub fn margin_loss(y_pos: f64, y_neg: f64, m: f64) -> f64 {
    (-(y_pos - y_neg) + m).max(0.0)
}

/// Gradient of the margin loss with respect to linear weights, for
/// `y = w · features`. Zero unless the margin is strictly violated.
pub fn margin_loss_gradient(
    weights: &[f64],
    positive: &PairFeatures,
    negative: &PairFeatures,
    m: f64,
) -> [f64; FEATURE_COUNT] {
    let mut grad = [0.0; FEATURE_COUNT];
    if margin_loss(positive.dot(weights), negative.dot(weights), m) > 0.0 {
        for (g, (p, n)) in grad.iter_mut().zip(positive.0.iter().zip(&negative.0)) {
            *g = n - p;
        }
    }
    grad
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub margin: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            learning_rate: 0.01,
            epochs: 1,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::InvalidArgument("margin must be > 0".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning rate must be > 0".into()));
        }
        Ok(())
    }
}

/// Serialized as `{weights, margin, seed, epochs, lr}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearScorerModel {
    pub weights: Vec<f64>,
    pub margin: f64,
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
}

impl LinearScorerModel {
    pub fn untrained(weights: Vec<f64>) -> Self {
        Self {
            weights,
            margin: 0.0,
            seed: 0,
            epochs: 0,
            lr: 0.0,
        }
    }

    /// Equal weight on every feature.
    pub fn uniform() -> Self {
        Self::untrained(vec![1.0 / FEATURE_COUNT as f64; FEATURE_COUNT])
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != FEATURE_COUNT {
            return Err(Error::DimensionMismatch {
                expected: FEATURE_COUNT,
                actual: self.weights.len(),
            });
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidArgument("non-finite scorer weight".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: Self = serde_json::from_str(&text)?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: LinearScorerModel,
    pub initial_mean_loss: f64,
    pub final_mean_loss: f64,
}

/// Feature vectors of `(anchor, positive)` and `(anchor, negative)`.
pub fn triplet_features(
    triplets: &[Triplet],
    pool: &Pool,
    cfg: &NormalizeConfig,
) -> Result<Vec<(PairFeatures, PairFeatures)>> {
    let norm = |id: &str| {
        normalize_function(pool.require(id)?, cfg).map_err(|e| Error::in_function(id, e))
    };
    triplets
        .iter()
        .map(|t| {
            t.validate(pool)?;
            let a = norm(&t.anchor_id)?;
            let p = norm(&t.positive_id)?;
            let n = norm(&t.negative_id)?;
            Ok((pair_features(&a, &p), pair_features(&a, &n)))
        })
        .collect()
}

pub fn mean_loss(weights: &[f64], pairs: &[(PairFeatures, PairFeatures)], m: f64) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs
        .iter()
        .map(|(p, n)| margin_loss(p.dot(weights), n.dot(weights), m))
        .sum::<f64>()
        / pairs.len() as f64
}

/// Per-triplet subgradient descent on the margin loss, starting from `init`.
pub fn train_on_features(
    pairs: &[(PairFeatures, PairFeatures)],
    init: &[f64],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no training triplets".into()));
    }
    if init.len() != FEATURE_COUNT {
        return Err(Error::DimensionMismatch {
            expected: FEATURE_COUNT,
            actual: init.len(),
        });
    }
    let mut weights = init.to_vec();
    let initial_mean_loss = mean_loss(&weights, pairs, cfg.margin);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for _ in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        for &i in &order {
            let (p, n) = &pairs[i];
            let grad = margin_loss_gradient(&weights, p, n, cfg.margin);
            for (w, g) in weights.iter_mut().zip(grad) {
                *w -= cfg.learning_rate * g;
            }
        }
    }
    let final_mean_loss = mean_loss(&weights, pairs, cfg.margin);
    Ok(TrainOutcome {
        model: LinearScorerModel {
            weights,
            margin: cfg.margin,
            seed: cfg.seed,
            epochs: cfg.epochs,
            lr: cfg.learning_rate,
        },
        initial_mean_loss,
        final_mean_loss,
    })
}

/// Trains from uniform initial weights.
pub fn train_linear_scorer(
    triplets: &[Triplet],
    pool: &Pool,
    cfg: &TrainConfig,
    norm: &NormalizeConfig,
) -> Result<TrainOutcome> {
    if triplets.is_empty() {
        return Err(Error::InvalidArgument("no training triplets".into()));
    }
    let pairs = triplet_features(triplets, pool, norm)?;
    train_on_features(&pairs, &LinearScorerModel::uniform().weights, cfg)
}
