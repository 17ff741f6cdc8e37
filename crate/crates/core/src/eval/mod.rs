//! Evaluation harness: Recall@k / nDCG@k, oracle upper bounds, per-run and
//! per-group reports, window sweeps and a synthetic corpus generator.

mod metrics;
mod report;
mod sweep;
pub mod synth;

use serde::{Deserialize, Serialize};

pub use metrics::{
    ndcg_at_k, ndcg_from_flags, ndcg_from_flags_with_log, oracle_rerank, recall_at_k,
    recall_from_flags,
};
pub use report::{
    evaluate_entries, evaluate_run, improvement_pct, EvalEntry, Improvement, MetricReport,
    MetricSummary, QueryMetrics,
};
pub use sweep::{fit_line, window_sweep, LinearFit, SweepReport, SweepRow};
pub use synth::{generate_synthetic_corpus, SynthConfig};

/// Wall-clock split of one query: embedding, window retrieval, re-ranking.
/// Durations in seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingBreakdown {
    pub t_phi: f64,
    pub t_sim: f64,
    pub t_rho: f64,
    pub w: usize,
    pub batch_size: usize,
}
