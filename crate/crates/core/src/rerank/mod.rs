//! Pairwise re-rankers.
//!
//! A [`Scorer`] maps `(query, candidate)` token pairs to raw logits; higher
//! means more likely compiled from the same source. The presentation score is
//! the logistic of the logit, so both orderings agree.

pub mod external;
pub mod features;
pub mod train;

use std::borrow::{Borrow, Cow};
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::Pool;
use crate::index::Window;
use crate::normalize::{normalize_function, truncated_sides, NormalizeConfig, TokenSequence};
use crate::{Error, Result};

pub use external::{Endpoint, ExternalConfig, ExternalScorer};
pub use features::{
    batch_features, pair_features, FeatureProfile, PairFeatures, FEATURE_COUNT, FEATURE_NAMES,
};
pub use train::{margin_loss, train_linear_scorer, LinearScorerModel, TrainConfig, TrainOutcome};

pub const DEFAULT_BATCH_SIZE: usize = 50;
const LOGIT_CLAMP: f64 = 1e-6;

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    let p = p.clamp(LOGIT_CLAMP, 1.0 - LOGIT_CLAMP);
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub id: String,
    pub raw_score: f64,
    pub display_score: f64,
}

impl ScoredCandidate {
    pub fn new(id: impl Into<String>, raw_score: f64) -> Self {
        Self {
            id: id.into(),
            raw_score,
            display_score: logistic(raw_score),
        }
    }
}

/// Score descending, then id ascending.
pub fn sort_scored(items: &mut [ScoredCandidate]) {
    items.sort_by(|a, b| {
        b.raw_score
            .total_cmp(&a.raw_score)
            .then_with(|| a.id.cmp(&b.id))
    });
}

pub type TokenPair<'a> = (&'a TokenSequence, &'a TokenSequence);

pub trait Scorer: Send + Sync {
    fn name(&self) -> String;

    /// Raw logits, one per pair, in input order.
    fn score_batch(&self, pairs: &[TokenPair<'_>]) -> Result<Vec<f64>>;

    fn score(&self, query: &TokenSequence, candidate: &TokenSequence) -> Result<ScoredCandidate> {
        let raw = self.score_batch(&[(query, candidate)])?;
        Ok(ScoredCandidate::new(candidate.origin_id.clone(), raw[0]))
    }
}

/// Logit of the mean similarity feature.
#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalScorer;

impl Scorer for LexicalScorer {
    fn name(&self) -> String {
        "lexical".into()
    }

    fn score_batch(&self, pairs: &[TokenPair<'_>]) -> Result<Vec<f64>> {
        Ok(batch_features(pairs)
            .iter()
            .map(|f| logit(f.mean_similarity()))
            .collect())
    }
}

#[derive(Debug, Clone)]
pub struct LinearScorer {
    pub model: LinearScorerModel,
}

impl LinearScorer {
    pub fn new(model: LinearScorerModel) -> Result<Self> {
        model.validate()?;
        Ok(Self { model })
    }

    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        Self::new(LinearScorerModel::untrained(weights))
    }
}

impl Scorer for LinearScorer {
    fn name(&self) -> String {
        "linear".into()
    }

    fn score_batch(&self, pairs: &[TokenPair<'_>]) -> Result<Vec<f64>> {
        Ok(batch_features(pairs)
            .iter()
            .map(|f| f.dot(&self.model.weights))
            .collect())
    }
}

/// Ground-truth scorer: +1 for equivalent functions, -1 otherwise.
#[derive(Debug, Clone, Default)]
pub struct OracleScorer {
    source_keys: HashMap<String, String>,
}

impl OracleScorer {
    pub fn from_pool(pool: &Pool) -> Self {
        Self {
            source_keys: pool
                .records()
                .iter()
                .map(|r| (r.id.clone(), r.source_key.clone()))
                .collect(),
        }
    }

    fn key(&self, id: &str) -> Result<&str> {
        self.source_keys
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::NoGroundTruth(id.to_owned()))
    }
}

impl Scorer for OracleScorer {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn score_batch(&self, pairs: &[TokenPair<'_>]) -> Result<Vec<f64>> {
        pairs
            .iter()
            .map(|(q, c)| {
                let same = self.key(&q.origin_id)? == self.key(&c.origin_id)?;
                Ok(if same { 1.0 } else { -1.0 })
            })
            .collect()
    }
}

/// Scores every candidate against the query and sorts by raw score
/// (descending, ties by ascending id). Pairs are left-truncated to the
/// configured token budget before scoring and sent in batches of
/// `batch_size`; the batch size never changes the result of a deterministic
/// scorer.
pub fn rerank_candidates<C: Borrow<TokenSequence>>(
    scorer: &dyn Scorer,
    query: &TokenSequence,
    candidates: &[C],
    cfg: &NormalizeConfig,
    batch_size: usize,
) -> Result<Vec<ScoredCandidate>> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot re-rank an empty window".into(),
        ));
    }
    let batch_size = batch_size.max(1);
    let sides: Vec<(Cow<'_, TokenSequence>, Cow<'_, TokenSequence>)> = candidates
        .iter()
        .map(|c| truncated_sides(query, c.borrow(), cfg))
        .collect();
    let mut out = Vec::with_capacity(candidates.len());
    for chunk in sides.chunks(batch_size) {
        let pairs: Vec<TokenPair<'_>> = chunk
            .iter()
            .map(|(q, c)| (q.as_ref(), c.as_ref()))
            .collect();
        let scores = scorer.score_batch(&pairs).map_err(|e| match chunk {
            [(_, c)] => Error::Scoring {
                id: c.origin_id.clone(),
                source: Box::new(e),
            },
            _ => e,
        })?;
        if scores.len() != pairs.len() {
            return Err(Error::Protocol(format!(
                "scorer returned {} scores for {} pairs",
                scores.len(),
                pairs.len()
            )));
        }
        for ((_, c), s) in chunk.iter().zip(scores) {
            if !s.is_finite() {
                return Err(Error::Scoring {
                    id: c.origin_id.clone(),
                    source: Box::new(Error::Protocol("non-finite score".into())),
                });
            }
            out.push(ScoredCandidate::new(c.origin_id.clone(), s));
        }
    }
    sort_scored(&mut out);
    Ok(out)
}

/// Normalizes the window's members from the pool and re-ranks them.
pub fn rerank_window(
    scorer: &dyn Scorer,
    query: &TokenSequence,
    window: &Window,
    pool: &Pool,
    cfg: &NormalizeConfig,
    batch_size: usize,
) -> Result<Vec<ScoredCandidate>> {
    let candidates = window
        .ids()
        .map(|id| {
            let rec = pool.require(id)?;
            normalize_function(rec, cfg).map_err(|e| Error::in_function(id, e))
        })
        .collect::<Result<Vec<_>>>()?;
    rerank_candidates(scorer, query, &candidates, cfg, batch_size)
}
