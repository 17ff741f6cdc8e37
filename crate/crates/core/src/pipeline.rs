//! Retrieval followed by re-ranking, for one embedder or an ensemble.
//!
//! Each embedder retrieves its own window; every window is re-ranked with the
//! same scorer; the re-ranked lists are merged, keeping the highest raw score
//! of an id seen in several windows; the merged list is sorted by score
//! (ties by ascending id) and cut to `k`.

use std::collections::{BTreeSet, HashMap};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Pool, QueryEntry, QuerySet};
use crate::embed::{Embedder, EmbeddingVector};
use crate::eval::TimingBreakdown;
use crate::index::{VectorIndex, Window};
use crate::normalize::{normalize_function, NormalizeConfig, TokenSequence};
use crate::rerank::{
    rerank_candidates, rerank_window, sort_scored, ScoredCandidate, Scorer, DEFAULT_BATCH_SIZE,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub w: usize,
    pub k: usize,
    /// Whether the query itself may appear among the candidates.
    pub include_self: bool,
    pub batch_size: usize,
}

impl SearchConfig {
    pub fn new(w: usize, k: usize) -> Self {
        Self {
            w,
            k,
            include_self: true,
            batch_size: DEFAULT_BATCH_SIZE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("k must be >= 1".into()));
        }
        if self.k > self.w {
            return Err(Error::InvalidArgument(format!(
                "k must be ≤ w (k = {}, w = {})",
                self.k, self.w
            )));
        }
        Ok(())
    }
}

/// One embedding model together with the index built from it.
#[derive(Clone, Copy)]
pub struct Retriever<'a> {
    pub embedder: &'a Embedder,
    pub index: &'a VectorIndex,
}

impl<'a> Retriever<'a> {
    pub fn new(embedder: &'a Embedder, index: &'a VectorIndex) -> Result<Self> {
        if embedder.spec() != index.embedder() {
            return Err(Error::InvalidArgument(format!(
                "index was built with `{}`, not `{}`",
                index.embedder(),
                embedder.spec()
            )));
        }
        Ok(Self { embedder, index })
    }

    pub fn name(&self) -> &str {
        &self.embedder.spec().name
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderWindow {
    pub embedder: String,
    pub window: Window,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub query_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    pub windows: Vec<EmbedderWindow>,
    #[serde(rename = "final")]
    pub ranking: Vec<ScoredCandidate>,
    /// Ground-truth variants of the query present in the pool.
    pub variants: Vec<String>,
    pub pool_size: usize,
    /// Absent in saved runs that leave out wall-clock data.
    #[serde(default)]
    pub timing: TimingBreakdown,
}

impl SearchResult {
    pub fn final_ids(&self) -> impl Iterator<Item = &str> + '_ {
        self.ranking.iter().map(|c| c.id.as_str())
    }

    /// Union of window members, first window's order first.
    pub fn window_ids(&self) -> Vec<&str> {
        let mut seen = BTreeSet::new();
        self.windows
            .iter()
            .flat_map(|w| w.window.ids())
            .filter(|id| seen.insert(*id))
            .collect()
    }

    /// Top-`k` of the first window without re-ranking.
    pub fn embedding_only(&self, k: usize) -> Vec<&str> {
        self.windows
            .first()
            .map(|w| w.window.ids().take(k).collect())
            .unwrap_or_default()
    }
}

/// Normalized token sequences of a whole pool, computed once up front.
#[derive(Debug, Clone)]
pub struct TokenCache {
    map: HashMap<String, TokenSequence>,
}

impl TokenCache {
    pub fn build(pool: &Pool, cfg: &NormalizeConfig) -> Result<Self> {
        let map = pool
            .records()
            .par_iter()
            .map(|r| {
                let t = normalize_function(r, cfg).map_err(|e| Error::in_function(&r.id, e))?;
                Ok((r.id.clone(), t))
            })
            .collect::<Result<HashMap<_, _>>>()?;
        Ok(Self { map })
    }

    pub fn get(&self, id: &str) -> Option<&TokenSequence> {
        self.map.get(id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

pub struct SearchEngine<'a> {
    pub pool: &'a Pool,
    pub normalize: &'a NormalizeConfig,
    pub scorer: &'a dyn Scorer,
    /// When set, candidates are not re-normalized per query. Outputs are unchanged.
    pub tokens: Option<&'a TokenCache>,
}

impl<'a> SearchEngine<'a> {
    pub fn new(pool: &'a Pool, normalize: &'a NormalizeConfig, scorer: &'a dyn Scorer) -> Self {
        Self {
            pool,
            normalize,
            scorer,
            tokens: None,
        }
    }

    /// Uses pre-normalized pool tokens, which must come from the same config.
    pub fn with_token_cache(mut self, cache: &'a TokenCache) -> Self {
        self.tokens = Some(cache);
        self
    }

    fn query_tokens(&self, query_id: &str) -> Result<TokenSequence> {
        if let Some(t) = self.tokens.and_then(|c| c.get(query_id)) {
            return Ok(t.clone());
        }
        let rec = self.pool.require(query_id)?;
        normalize_function(rec, self.normalize).map_err(|e| Error::in_function(query_id, e))
    }

    pub fn search(
        &self,
        query_id: &str,
        retriever: Retriever<'_>,
        cfg: &SearchConfig,
    ) -> Result<SearchResult> {
        self.ensemble_search(query_id, &[retriever], cfg)
    }

    pub fn ensemble_search(
        &self,
        query_id: &str,
        retrievers: &[Retriever<'_>],
        cfg: &SearchConfig,
    ) -> Result<SearchResult> {
        cfg.validate()?;
        if retrievers.is_empty() {
            return Err(Error::InvalidArgument(
                "at least one embedder is required".into(),
            ));
        }
        let mut timing = TimingBreakdown {
            w: cfg.w,
            batch_size: cfg.batch_size,
            ..TimingBreakdown::default()
        };

        let start = Instant::now();
        let query = self.query_tokens(query_id)?;
        timing.t_phi += start.elapsed().as_secs_f64();

        let mut windows = Vec::with_capacity(retrievers.len());
        let mut merged: HashMap<String, ScoredCandidate> = HashMap::new();
        for r in retrievers {
            let start = Instant::now();
            let qv = r
                .embedder
                .embed(&query)
                .map_err(|e| Error::in_function(query_id, e))?;
            timing.t_phi += start.elapsed().as_secs_f64();

            let start = Instant::now();
            let window = self.retrieve(query_id, r.index, &qv, cfg)?;
            timing.t_sim += start.elapsed().as_secs_f64();

            let start = Instant::now();
            let ranked = match self.tokens {
                Some(cache) => {
                    let candidates = window
                        .ids()
                        .map(|id| cache.get(id).ok_or_else(|| Error::UnknownId(id.to_owned())))
                        .collect::<Result<Vec<_>>>()?;
                    rerank_candidates(
                        self.scorer,
                        &query,
                        &candidates,
                        self.normalize,
                        cfg.batch_size,
                    )?
                }
                None => rerank_window(
                    self.scorer,
                    &query,
                    &window,
                    self.pool,
                    self.normalize,
                    cfg.batch_size,
                )?,
            };
            timing.t_rho += start.elapsed().as_secs_f64();

            merge_max(&mut merged, ranked);
            windows.push(EmbedderWindow {
                embedder: r.name().to_owned(),
                window,
            });
        }

        let mut ranking: Vec<ScoredCandidate> = merged.into_values().collect();
        sort_scored(&mut ranking);
        ranking.truncate(cfg.k);

        let variants = self
            .pool
            .variants_of(query_id, cfg.include_self)?
            .into_iter()
            .collect();
        Ok(SearchResult {
            query_id: query_id.to_owned(),
            group: None,
            windows,
            ranking,
            variants,
            pool_size: self.pool.len(),
            timing,
        })
    }

    fn retrieve(
        &self,
        query_id: &str,
        index: &VectorIndex,
        qv: &EmbeddingVector,
        cfg: &SearchConfig,
    ) -> Result<Window> {
        if cfg.include_self {
            return index.query_window_for(query_id, qv, cfg.w);
        }
        let mut window = index.query_window_for(query_id, qv, cfg.w + 1)?;
        match window.candidates.iter().position(|c| c.id == query_id) {
            Some(i) => {
                window.candidates.remove(i);
            }
            None => window.candidates.truncate(cfg.w),
        }
        window.w = cfg.w;
        Ok(window)
    }

    /// Re-ranks the entire pool: `search` with `w = |pool|`.
    pub fn full_pool_rank(
        &self,
        query_id: &str,
        retriever: Retriever<'_>,
        k: usize,
    ) -> Result<SearchResult> {
        let cfg = SearchConfig::new(self.pool.len(), k.min(self.pool.len()));
        self.search(query_id, retriever, &cfg)
    }
}

/// Runs every query of the set, carrying group labels into the results.
/// With `parallel` the queries are spread over the current rayon pool;
/// results keep the query-set order either way.
pub fn run_queries(
    engine: &SearchEngine<'_>,
    retrievers: &[Retriever<'_>],
    queries: &QuerySet,
    cfg: &SearchConfig,
    parallel: bool,
) -> Result<Vec<SearchResult>> {
    cfg.validate()?;
    queries.validate(engine.pool)?;
    let one = |e: &QueryEntry| {
        let mut r = engine.ensemble_search(&e.query_id, retrievers, cfg)?;
        r.group = e.group.clone();
        Ok(r)
    };
    if parallel {
        queries.entries.par_iter().map(one).collect()
    } else {
        queries.entries.iter().map(one).collect()
    }
}

/// Keeps, for every id, the candidate with the highest raw score.
pub fn merge_max(into: &mut HashMap<String, ScoredCandidate>, ranked: Vec<ScoredCandidate>) {
    for c in ranked {
        match into.get(&c.id) {
            Some(prev) if prev.raw_score >= c.raw_score => {}
            _ => {
                into.insert(c.id.clone(), c);
            }
        }
    }
}

/// Merges already re-ranked lists into one ranking.
pub fn merge_ranked_lists(lists: Vec<Vec<ScoredCandidate>>, k: usize) -> Vec<ScoredCandidate> {
    let mut merged = HashMap::new();
    for l in lists {
        merge_max(&mut merged, l);
    }
    let mut out: Vec<ScoredCandidate> = merged.into_values().collect();
    sort_scored(&mut out);
    out.truncate(k);
    out
}
