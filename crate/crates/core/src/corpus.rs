//! Function pools, query sets and fine-tuning triplets.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::index::VectorIndex;
use crate::{Error, Result};

/// One disassembled function. `source_key` is the ground-truth equivalence
/// label: two records with the same key were compiled from the same source.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionRecord {
    pub id: String,
    pub binary_id: String,
    pub source_key: String,
    pub compiler: String,
    pub opt_level: String,
    pub base_address: u64,
    pub instructions: Vec<String>,
}

impl FunctionRecord {
    fn validate(&self) -> Result<()> {
        let invalid = |reason: &str| Error::InvalidRecord {
            id: self.id.clone(),
            reason: reason.to_owned(),
        };
        if self.id.is_empty() {
            return Err(invalid("empty id"));
        }
        if self.source_key.is_empty() {
            return Err(invalid("empty source_key"));
        }
        if self.instructions.is_empty() {
            return Err(invalid("no instructions"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Pool {
    records: Vec<FunctionRecord>,
    position: HashMap<String, usize>,
    by_source_key: BTreeMap<String, BTreeSet<String>>,
}

impl Pool {
    pub fn new(records: Vec<FunctionRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::InvalidArgument(
                "pool must contain at least one record".into(),
            ));
        }
        let mut position = HashMap::with_capacity(records.len());
        let mut by_source_key: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            r.validate()?;
            if position.insert(r.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(r.id.clone()));
            }
            by_source_key
                .entry(r.source_key.clone())
                .or_default()
                .insert(r.id.clone());
        }
        Ok(Self {
            records,
            position,
            by_source_key,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records in load order.
    pub fn records(&self) -> &[FunctionRecord] {
        &self.records
    }

    pub fn get(&self, id: &str) -> Option<&FunctionRecord> {
        self.position.get(id).map(|&i| &self.records[i])
    }

    pub fn require(&self, id: &str) -> Result<&FunctionRecord> {
        self.get(id).ok_or_else(|| Error::UnknownId(id.to_owned()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.position.contains_key(id)
    }

    pub fn by_source_key(&self) -> &BTreeMap<String, BTreeSet<String>> {
        &self.by_source_key
    }

    /// Ids sorted ascending.
    pub fn sorted_ids(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.records.iter().map(|r| r.id.as_str()).collect();
        ids.sort_unstable();
        ids
    }

    /// Pool members sharing the query's source key.
    pub fn variants_of(&self, query_id: &str, include_self: bool) -> Result<BTreeSet<String>> {
        let rec = self.require(query_id)?;
        let mut set = self.by_source_key[&rec.source_key].clone();
        if !include_self {
            set.remove(query_id);
        }
        Ok(set)
    }

    pub fn same_source(&self, a: &str, b: &str) -> Option<bool> {
        Some(self.get(a)?.source_key == self.get(b)?.source_key)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.records)
    }
}

/// Reads a newline-delimited JSON corpus, one [`FunctionRecord`] per line.
/// Blank lines are ignored.
pub fn load_corpus(path: &Path) -> Result<Pool> {
    let records: Vec<FunctionRecord> = read_jsonl(path)?;
    Pool::new(records)
}

pub(crate) fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: path.to_owned(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryEntry {
    pub query_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QuerySet {
    pub entries: Vec<QueryEntry>,
}

impl QuerySet {
    pub fn from_ids<I, S>(ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            entries: ids
                .into_iter()
                .map(|id| QueryEntry {
                    query_id: id.into(),
                    group: None,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> + '_ {
        self.entries.iter().map(|e| e.query_id.as_str())
    }

    pub fn validate(&self, pool: &Pool) -> Result<()> {
        match self.entries.iter().find(|e| !pool.contains(&e.query_id)) {
            Some(e) => Err(Error::UnknownId(e.query_id.clone())),
            None => Ok(()),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self {
            entries: read_jsonl(path)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.entries)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor_id: String,
    pub positive_id: String,
    pub negative_id: String,
    /// Name of the embedder whose neighbourhood produced the negative.
    pub negative_source: String,
}

impl Triplet {
    pub fn validate(&self, pool: &Pool) -> Result<()> {
        let key = |id: &str| pool.require(id).map(|r| r.source_key.as_str());
        let anchor = key(&self.anchor_id)?;
        let bad = |reason: &str| {
            Error::InvalidArgument(format!(
                "triplet ({}, {}, {}): {reason}",
                self.anchor_id, self.positive_id, self.negative_id
            ))
        };
        if self.anchor_id == self.positive_id {
            return Err(bad("anchor and positive are the same function"));
        }
        if key(&self.positive_id)? != anchor {
            return Err(bad("positive is not equivalent to the anchor"));
        }
        if key(&self.negative_id)? == anchor {
            return Err(bad("negative is equivalent to the anchor"));
        }
        Ok(())
    }
}

/// Triplet line as written by the miner; carries the mining provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TripletLine {
    #[serde(flatten)]
    triplet: Triplet,
    seed: u64,
    mining_depth: usize,
}

pub fn write_triplets(
    path: &Path,
    triplets: &[Triplet],
    seed: u64,
    mining_depth: usize,
) -> Result<()> {
    let lines: Vec<TripletLine> = triplets
        .iter()
        .map(|t| TripletLine {
            triplet: t.clone(),
            seed,
            mining_depth,
        })
        .collect();
    write_jsonl(path, &lines)
}

pub fn read_triplets(path: &Path) -> Result<Vec<Triplet>> {
    Ok(read_jsonl::<TripletLine>(path)?
        .into_iter()
        .map(|l| l.triplet)
        .collect())
}

pub const DEFAULT_MINING_DEPTH: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MiningConfig {
    pub negatives_per_embedder: usize,
    pub mining_depth: usize,
    pub seed: u64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            negatives_per_embedder: 1,
            mining_depth: DEFAULT_MINING_DEPTH,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct MiningOutcome {
    pub triplets: Vec<Triplet>,
    /// Anchors without any equivalent function to pair with.
    pub skipped: Vec<String>,
}

/// Builds `(anchor, positive, hard negative)` triplets.
///
/// For every anchor one positive is drawn from its variants, then each index
/// contributes `negatives_per_embedder` negatives sampled from its
/// `mining_depth` nearest non-equivalent neighbours. Anchors are processed in
/// ascending id order, each with its own RNG stream, so the output does not
/// depend on how the work is scheduled.
pub fn mine_triplets(
    pool: &Pool,
    anchors: &QuerySet,
    indexes: &[&VectorIndex],
    cfg: &MiningConfig,
) -> Result<MiningOutcome> {
    if cfg.mining_depth < cfg.negatives_per_embedder {
        return Err(Error::InvalidArgument(
            "mining_depth must be >= negatives_per_embedder".into(),
        ));
    }
    anchors.validate(pool)?;
    let ordered: BTreeSet<&str> = anchors.ids().collect();
    let ordered: Vec<&str> = ordered.into_iter().collect();

    let per_anchor = ordered
        .par_iter()
        .enumerate()
        .map(|(stream, &anchor)| mine_anchor(pool, anchor, stream as u64, indexes, cfg))
        .collect::<Result<Vec<_>>>()?;

    let mut outcome = MiningOutcome::default();
    for (anchor, triplets) in ordered.iter().zip(per_anchor) {
        match triplets {
            Some(t) => outcome.triplets.extend(t),
            None => {
                log::warn!("anchor `{anchor}` has no positive variant; skipped");
                outcome.skipped.push((*anchor).to_owned());
            }
        }
    }
    Ok(outcome)
}

fn mine_anchor(
    pool: &Pool,
    anchor: &str,
    stream: u64,
    indexes: &[&VectorIndex],
    cfg: &MiningConfig,
) -> Result<Option<Vec<Triplet>>> {
    let positives: Vec<String> = pool.variants_of(anchor, false)?.into_iter().collect();
    if positives.is_empty() {
        return Ok(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let positive = &positives[rng.gen_range(0..positives.len())];
    let class_size = positives.len() + 1;

    let mut out = Vec::with_capacity(indexes.len() * cfg.negatives_per_embedder);
    for index in indexes {
        let query = index.vector_of(anchor).ok_or_else(|| {
            Error::in_function(
                anchor,
                Error::InvalidArgument(format!(
                    "not present in index built with `{}`",
                    index.embedder().name
                )),
            )
        })?;
        let window = index.query_window(&query, cfg.mining_depth + class_size)?;
        let hard: Vec<&str> = window
            .candidates
            .iter()
            .map(|c| c.id.as_str())
            .filter(|id| pool.same_source(anchor, id) == Some(false))
            .take(cfg.mining_depth)
            .collect();
        let n = cfg.negatives_per_embedder.min(hard.len());
        let mut picks = sample(&mut rng, hard.len(), n).into_vec();
        picks.sort_unstable();
        out.extend(picks.into_iter().map(|i| Triplet {
            anchor_id: anchor.to_owned(),
            positive_id: positive.clone(),
            negative_id: hard[i].to_owned(),
            negative_source: index.embedder().name.clone(),
        }));
    }
    Ok(Some(out))
}
