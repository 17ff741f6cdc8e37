//! Hand-crafted pair features standing in for a cross-encoder's joint view
//! of `(query, candidate)`.

use std::collections::HashSet;
use std::hash::Hash;

use crate::normalize::TokenSequence;

pub const FEATURE_NAMES: [&str; 6] = [
    "token_jaccard",
    "mnemonic_cosine",
    "length_ratio",
    "mnemonic_edit_similarity",
    "libc_call_jaccard",
    "bias",
];
pub const FEATURE_COUNT: usize = FEATURE_NAMES.len();
/// Index of the constant feature.
pub const BIAS: usize = FEATURE_COUNT - 1;

/// Every entry lies in `[0, 1]`; the last one is the constant 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairFeatures(pub [f64; FEATURE_COUNT]);

impl PairFeatures {
    pub fn values(&self) -> &[f64; FEATURE_COUNT] {
        &self.0
    }

    /// Mean of the similarity features (bias excluded).
    pub fn mean_similarity(&self) -> f64 {
        self.0[..BIAS].iter().sum::<f64>() / BIAS as f64
    }

    pub fn dot(&self, weights: &[f64]) -> f64 {
        self.0.iter().zip(weights).map(|(f, w)| f * w).sum()
    }
}

/// Set Jaccard; two empty sets count as identical.
pub fn jaccard<T: Eq + Hash>(a: &HashSet<T>, b: &HashSet<T>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.iter().filter(|x| b.contains(x)).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// Sums `f` over keys present in both sorted slices.
fn merge_join<K: Ord, T>(a: &[(K, T)], b: &[(K, T)], f: impl Fn(&T, &T) -> f64) -> f64 {
    let (mut i, mut j, mut acc) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                acc += f(&a[i].1, &b[j].1);
                i += 1;
                j += 1;
            }
        }
    }
    acc
}

/// Jaccard over sorted, duplicate-free sets; two empty sets count as identical.
fn sorted_jaccard(a: &[(Keyed<'_>, ())], b: &[(Keyed<'_>, ())]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = merge_join(a, b, |_, _| 1.0);
    inter / (a.len() as f64 + b.len() as f64 - inter)
}

fn histogram_cosine(a: &[(Keyed<'_>, f64)], b: &[(Keyed<'_>, f64)]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let dot = merge_join(a, b, |x, y| x * y);
    let na = a.iter().map(|(_, x)| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|(_, x)| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(0.0, 1.0)
    }
}

pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 - lev(a, b) / max(|a|, |b|)`, 1 for two empty sequences.
pub fn edit_similarity<T: PartialEq>(a: &[T], b: &[T]) -> f64 {
    let longest = a.len().max(b.len());
    if longest == 0 {
        return 1.0;
    }
    1.0 - levenshtein(a, b) as f64 / longest as f64
}

pub fn length_ratio(a: usize, b: usize) -> f64 {
    match a.max(b) {
        0 => 1.0,
        m => a.min(b) as f64 / m as f64,
    }
}

fn sorted_set<'a>(items: impl Iterator<Item = &'a str>) -> Vec<(Keyed<'a>, ())> {
    let mut v: Vec<Keyed<'a>> = items.map(Keyed::new).collect();
    v.sort_unstable();
    v.dedup();
    v.into_iter().map(|x| (x, ())).collect()
}

/// A token with a precomputed hash; ordered by `(hash, text)` so that unequal
/// hashes settle most comparisons without touching the text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Keyed<'a>(u64, &'a str);

impl<'a> Keyed<'a> {
    fn new(text: &'a str) -> Self {
        let h = text.bytes().fold(text.len() as u64, |h, b| {
            (h.rotate_left(5) ^ u64::from(b)).wrapping_mul(0x517c_c1b7_2722_0a95)
        });
        Self(h, text)
    }
}

/// One side's share of the pair features, computed once and reused.
#[derive(Debug, Clone)]
pub struct FeatureProfile<'a> {
    len: usize,
    tokens: Vec<(Keyed<'a>, ())>,
    mnemonics: Vec<Keyed<'a>>,
    histogram: Vec<(Keyed<'a>, f64)>,
    calls: Vec<(Keyed<'a>, ())>,
}

impl<'a> FeatureProfile<'a> {
    pub fn new(seq: &'a TokenSequence) -> Self {
        let mnemonics: Vec<Keyed<'a>> = seq.mnemonics().map(Keyed::new).collect();
        let mut sorted = mnemonics.clone();
        sorted.sort_unstable();
        let mut histogram: Vec<(Keyed<'a>, f64)> = Vec::new();
        for m in sorted {
            match histogram.last_mut() {
                Some((k, n)) if *k == m => *n += 1.0,
                _ => histogram.push((m, 1.0)),
            }
        }
        Self {
            len: seq.len(),
            tokens: sorted_set(seq.tokens.iter().map(String::as_str)),
            mnemonics,
            histogram,
            calls: sorted_set(seq.call_targets()),
        }
    }

    pub fn features(&self, other: &FeatureProfile<'_>) -> PairFeatures {
        PairFeatures([
            sorted_jaccard(&self.tokens, &other.tokens),
            histogram_cosine(&self.histogram, &other.histogram),
            length_ratio(self.len, other.len),
            edit_similarity(&self.mnemonics, &other.mnemonics),
            sorted_jaccard(&self.calls, &other.calls),
            1.0,
        ])
    }
}

pub fn pair_features(query: &TokenSequence, candidate: &TokenSequence) -> PairFeatures {
    FeatureProfile::new(query).features(&FeatureProfile::new(candidate))
}

/// Features for a batch of pairs; consecutive pairs sharing a query profile it once.
pub fn batch_features(pairs: &[(&TokenSequence, &TokenSequence)]) -> Vec<PairFeatures> {
    let mut out = Vec::with_capacity(pairs.len());
    let mut current: Option<(&TokenSequence, FeatureProfile<'_>)> = None;
    for &(q, c) in pairs {
        if !matches!(&current, Some((prev, _)) if std::ptr::eq(*prev, q)) {
            current = Some((q, FeatureProfile::new(q)));
        }
        if let Some((_, qp)) = &current {
            out.push(qp.features(&FeatureProfile::new(c)));
        }
    }
    out
}
