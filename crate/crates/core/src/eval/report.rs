use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::{ndcg_at_k, oracle_rerank, recall_at_k};
use crate::pipeline::SearchResult;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub query_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub oracle_recall: BTreeMap<usize, f64>,
    pub oracle_ndcg: BTreeMap<usize, f64>,
}

/// Arithmetic means over a set of queries.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub queries: usize,
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub oracle_recall: BTreeMap<usize, f64>,
    pub oracle_ndcg: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    /// `(new - old) / old * 100`; absent when the baseline value is 0.
    pub recall_pct: BTreeMap<usize, Option<f64>>,
    pub ndcg_pct: BTreeMap<usize, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ks: Vec<usize>,
    pub per_query: Vec<QueryMetrics>,
    pub mean: MetricSummary,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub groups: BTreeMap<String, MetricSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub improvement: Option<Improvement>,
}

pub fn improvement_pct(old: f64, new: f64) -> Option<f64> {
    (old != 0.0).then(|| (new - old) / old * 100.0)
}

/// What gets scored for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalEntry {
    pub query_id: String,
    pub group: Option<String>,
    pub ranking: Vec<String>,
    /// Candidates the oracle may reorder.
    pub window: Vec<String>,
    pub variants: BTreeSet<String>,
    pub pool_size: usize,
}

impl EvalEntry {
    /// Re-ranked output of a search.
    pub fn reranked(r: &SearchResult) -> Self {
        Self {
            query_id: r.query_id.clone(),
            group: r.group.clone(),
            ranking: r.final_ids().map(str::to_owned).collect(),
            window: r.window_ids().into_iter().map(str::to_owned).collect(),
            variants: r.variants.iter().cloned().collect(),
            pool_size: r.pool_size,
        }
    }

    /// The first embedder's window order, ignoring the re-ranker.
    pub fn embedding_only(r: &SearchResult) -> Self {
        let window: Vec<String> = r
            .windows
            .first()
            .map(|w| w.window.ids().map(str::to_owned).collect())
            .unwrap_or_default();
        Self {
            query_id: r.query_id.clone(),
            group: r.group.clone(),
            ranking: window.clone(),
            window,
            variants: r.variants.iter().cloned().collect(),
            pool_size: r.pool_size,
        }
    }
}

fn summarize<'a>(ks: &[usize], rows: impl Iterator<Item = &'a QueryMetrics>) -> MetricSummary {
    let rows: Vec<&QueryMetrics> = rows.collect();
    let n = rows.len();
    let mean = |pick: &dyn Fn(&QueryMetrics) -> &BTreeMap<usize, f64>| -> BTreeMap<usize, f64> {
        ks.iter()
            .map(|&k| {
                let total: f64 = rows.iter().map(|q| pick(q)[&k]).sum();
                (k, if n == 0 { 0.0 } else { total / n as f64 })
            })
            .collect()
    };
    MetricSummary {
        queries: n,
        recall: mean(&|q| &q.recall),
        ndcg: mean(&|q| &q.ndcg),
        oracle_recall: mean(&|q| &q.oracle_recall),
        oracle_ndcg: mean(&|q| &q.oracle_ndcg),
    }
}

pub fn evaluate_entries(
    entries: &[EvalEntry],
    ks: &[usize],
    baseline: Option<&MetricReport>,
) -> Result<MetricReport> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::InvalidArgument(
            "ks must be non-empty and >= 1".into(),
        ));
    }
    let mut ks: Vec<usize> = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();

    let mut per_query = Vec::with_capacity(entries.len());
    for e in entries {
        if e.variants.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "query `{}` has no relevant functions",
                e.query_id
            )));
        }
        let oracle = oracle_rerank(&e.window, &e.variants);
        let mut q = QueryMetrics {
            query_id: e.query_id.clone(),
            group: e.group.clone(),
            recall: BTreeMap::new(),
            ndcg: BTreeMap::new(),
            oracle_recall: BTreeMap::new(),
            oracle_ndcg: BTreeMap::new(),
        };
        for &k in &ks {
            let eff = if e.pool_size > 0 && k > e.pool_size {
                log::warn!("k = {k} exceeds pool size {}; clamped", e.pool_size);
                e.pool_size
            } else {
                k
            };
            q.recall
                .insert(k, recall_at_k(&e.ranking, &e.variants, eff)?);
            q.ndcg.insert(k, ndcg_at_k(&e.ranking, &e.variants, eff)?);
            q.oracle_recall
                .insert(k, recall_at_k(&oracle, &e.variants, eff)?);
            q.oracle_ndcg
                .insert(k, ndcg_at_k(&oracle, &e.variants, eff)?);
        }
        per_query.push(q);
    }
    per_query.sort_by(|a, b| a.query_id.cmp(&b.query_id));

    let mean = summarize(&ks, per_query.iter());
    let mut labels: BTreeSet<&str> = BTreeSet::new();
    labels.extend(per_query.iter().filter_map(|q| q.group.as_deref()));
    let groups = labels
        .into_iter()
        .map(|g| {
            let rows = per_query.iter().filter(|q| q.group.as_deref() == Some(g));
            (g.to_owned(), summarize(&ks, rows))
        })
        .collect();

    let improvement = match baseline {
        None => None,
        Some(base) => {
            let ids = |r: &[QueryMetrics]| r.iter().map(|q| q.query_id.clone()).collect::<Vec<_>>();
            if ids(&base.per_query) != ids(&per_query) {
                return Err(Error::InvalidArgument(
                    "baseline covers a different query set".into(),
                ));
            }
            let pct = |old: &BTreeMap<usize, f64>, new: &BTreeMap<usize, f64>| {
                ks.iter()
                    .map(|k| {
                        let v = match (old.get(k), new.get(k)) {
                            (Some(&o), Some(&n)) => improvement_pct(o, n),
                            _ => None,
                        };
                        (*k, v)
                    })
                    .collect()
            };
            Some(Improvement {
                recall_pct: pct(&base.mean.recall, &mean.recall),
                ndcg_pct: pct(&base.mean.ndcg, &mean.ndcg),
            })
        }
    };

    Ok(MetricReport {
        ks,
        per_query,
        mean,
        groups,
        improvement,
    })
}

/// Scores re-ranked search output; oracle values use each query's window.
pub fn evaluate_run(
    results: &[SearchResult],
    ks: &[usize],
    baseline: Option<&MetricReport>,
) -> Result<MetricReport> {
    let entries: Vec<EvalEntry> = results.iter().map(EvalEntry::reranked).collect();
    evaluate_entries(&entries, ks, baseline)
}

impl MetricReport {
    /// Plain-text table: one row per scope, nDCG columns then Recall columns.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let width = 7;
        let _ = write!(out, "{:<16}", "");
        let _ = write!(out, "{:<w$}", "nDCG", w = width * self.ks.len());
        let _ = writeln!(out, "{}", "Recall");
        let _ = write!(out, "{:<16}", "scope");
        for _ in 0..2 {
            for k in &self.ks {
                let _ = write!(out, "{:<width$}", format!("@{k}"));
            }
        }
        out.push('\n');
        let mut row = |name: &str, s: &MetricSummary, ndcg: bool| {
            let _ = write!(out, "{name:<16}");
            let (a, b) = if ndcg {
                (&s.ndcg, &s.recall)
            } else {
                (&s.oracle_ndcg, &s.oracle_recall)
            };
            for k in &self.ks {
                let _ = write!(out, "{:<width$}", format!("{:.2}", a[k]));
            }
            for k in &self.ks {
                let _ = write!(out, "{:<width$}", format!("{:.2}", b[k]));
            }
            out.push('\n');
        };
        row("all", &self.mean, true);
        row("all (oracle)", &self.mean, false);
        for (g, s) in &self.groups {
            row(g, s, true);
        }
        if let Some(imp) = &self.improvement {
            let _ = write!(out, "{:<16}", "improvement %");
            for map in [&imp.ndcg_pct, &imp.recall_pct] {
                for k in &self.ks {
                    let cell = match map.get(k).copied().flatten() {
                        Some(v) => format!("{v:+.1}"),
                        None => "-".to_owned(),
                    };
                    let _ = write!(out, "{cell:<width$}");
                }
            }
            out.push('\n');
        }
        out
    }
}
