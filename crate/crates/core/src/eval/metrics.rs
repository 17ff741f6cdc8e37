use std::collections::BTreeSet;

use crate::{Error, Result};

/// `|V ∩ top-k| / |V|` given relevance flags of the ranking.
pub fn recall_from_flags(flags: &[bool], relevant_total: usize, k: usize) -> Result<f64> {
    if relevant_total == 0 {
        return Err(Error::InvalidArgument("empty relevant set".into()));
    }
    let hits = flags.iter().take(k).filter(|&&f| f).count();
    Ok(hits as f64 / relevant_total as f64)
}

/// nDCG with the gain of rank `i` (1-based) equal to `1 / log(1 + i)`.
/// The ideal ranking places `min(k, relevant_total)` relevant items first.
/// The result does not depend on the logarithm's base.
pub fn ndcg_from_flags(flags: &[bool], relevant_total: usize, k: usize) -> Result<f64> {
    ndcg_from_flags_with_log(flags, relevant_total, k, f64::ln)
}

pub fn ndcg_from_flags_with_log(
    flags: &[bool],
    relevant_total: usize,
    k: usize,
    log: impl Fn(f64) -> f64,
) -> Result<f64> {
    if relevant_total == 0 {
        return Err(Error::InvalidArgument("empty relevant set".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let gain = |i: usize| 1.0 / log(1.0 + i as f64);
    let dcg: f64 = flags
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, &f)| f)
        .map(|(i, _)| gain(i + 1))
        .sum();
    let ideal: f64 = (1..=k.min(relevant_total)).map(gain).sum();
    Ok(dcg / ideal)
}

fn flags<S: AsRef<str>>(ranked: &[S], relevant: &BTreeSet<String>) -> Result<Vec<bool>> {
    let mut seen = BTreeSet::new();
    ranked
        .iter()
        .map(|id| {
            let id = id.as_ref();
            if !seen.insert(id) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate id `{id}` in ranking"
                )));
            }
            Ok(relevant.contains(id))
        })
        .collect()
}

pub fn recall_at_k<S: AsRef<str>>(
    ranked: &[S],
    relevant: &BTreeSet<String>,
    k: usize,
) -> Result<f64> {
    recall_from_flags(&flags(ranked, relevant)?, relevant.len(), k)
}

pub fn ndcg_at_k<S: AsRef<str>>(
    ranked: &[S],
    relevant: &BTreeSet<String>,
    k: usize,
) -> Result<f64> {
    ndcg_from_flags(&flags(ranked, relevant)?, relevant.len(), k)
}

/// Best possible re-ordering of a window: relevant members first, then the
/// rest, each group by ascending id.
pub fn oracle_rerank<S: AsRef<str>>(window: &[S], relevant: &BTreeSet<String>) -> Vec<String> {
    let (mut hit, mut miss): (Vec<String>, Vec<String>) = window
        .iter()
        .map(|s| s.as_ref().to_owned())
        .partition(|id| relevant.contains(id));
    hit.sort();
    miss.sort();
    hit.extend(miss);
    hit
}
