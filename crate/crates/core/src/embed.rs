//! Function embedders.
//!
//! Two deterministic built-ins hash normalized tokens (`bow-hash`) or adjacent
//! token pairs (`bigram-hash`) into a fixed number of buckets and L2-normalize
//! the counts. The `external` embedder serves vectors precomputed by some
//! other model from a JSONL sidecar (`{"id": ..., "vector": [...]}`).

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{read_jsonl, Pool};
use crate::normalize::{normalize_function, NormalizeConfig, TokenSequence};
use crate::{Error, Result};

pub const BOW_HASH: &str = "bow-hash";
pub const BIGRAM_HASH: &str = "bigram-hash";
pub const EXTERNAL: &str = "external";
pub const DEFAULT_DIM: usize = 128;

/// Identifies an embedder and its parameters; recorded with every index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedderSpec {
    pub name: String,
    pub dim: usize,
    #[serde(default)]
    pub params: BTreeMap<String, String>,
}

impl EmbedderSpec {
    pub fn bow_hash(dim: usize, seed: u64) -> Self {
        Self::hashed(BOW_HASH, dim, seed)
    }

    pub fn bigram_hash(dim: usize, seed: u64) -> Self {
        Self::hashed(BIGRAM_HASH, dim, seed)
    }

    fn hashed(name: &str, dim: usize, seed: u64) -> Self {
        Self {
            name: name.to_owned(),
            dim,
            params: BTreeMap::from([("seed".to_owned(), seed.to_string())]),
        }
    }

    pub fn seed(&self) -> Result<u64> {
        match self.params.get("seed") {
            None => Ok(0),
            Some(s) => s
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad embedder seed `{s}`"))),
        }
    }

    /// Parses the compact `name;dim=128;seed=7` form produced by `Display`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut parts = text.split(';');
        let name = parts.next().unwrap_or_default().trim();
        if name.is_empty() {
            return Err(Error::UnknownEmbedder(text.to_owned()));
        }
        let mut spec = Self {
            name: name.to_owned(),
            dim: DEFAULT_DIM,
            params: BTreeMap::new(),
        };
        for part in parts.filter(|p| !p.is_empty()) {
            let (k, v) = part.split_once('=').ok_or_else(|| {
                Error::InvalidArgument(format!("bad embedder parameter `{part}`"))
            })?;
            if k == "dim" {
                spec.dim = v
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad embedder dim `{v}`")))?;
            } else {
                spec.params.insert(k.to_owned(), v.to_owned());
            }
        }
        Ok(spec)
    }
}

impl fmt::Display for EmbedderSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{};dim={}", self.name, self.dim)?;
        for (k, v) in &self.params {
            write!(f, ";{k}={v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// The all-zero vector stands for "no evidence"; its cosine with anything is 0.
    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

/// Cosine similarity, defined as 0 when either side is the zero vector.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Seeded 64-bit FNV-1a followed by a splitmix finalizer. Stable across
/// platforms and releases, unlike `std`'s default hasher.
pub fn seeded_hash(seed: u64, bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

pub fn bucket(seed: u64, token: &str, dim: usize) -> usize {
    (seeded_hash(seed, token.as_bytes()) % dim as u64) as usize
}

#[derive(Debug, Clone)]
pub enum Embedder {
    BowHash {
        spec: EmbedderSpec,
        seed: u64,
    },
    BigramHash {
        spec: EmbedderSpec,
        seed: u64,
    },
    External {
        spec: EmbedderSpec,
        vectors: HashMap<String, Vec<f64>>,
    },
}

#[derive(Deserialize)]
struct SidecarLine {
    id: String,
    vector: Vec<f64>,
}

impl Embedder {
    /// Instantiates a built-in embedder. `external` needs [`Embedder::from_sidecar`].
    pub fn from_spec(spec: &EmbedderSpec) -> Result<Self> {
        if spec.dim == 0 {
            return Err(Error::InvalidArgument("embedder dim must be > 0".into()));
        }
        let seed = spec.seed()?;
        match spec.name.as_str() {
            BOW_HASH => Ok(Embedder::BowHash {
                spec: spec.clone(),
                seed,
            }),
            BIGRAM_HASH => Ok(Embedder::BigramHash {
                spec: spec.clone(),
                seed,
            }),
            _ => Err(Error::UnknownEmbedder(spec.name.clone())),
        }
    }

    /// Loads precomputed vectors; every line must have dimension `dim`.
    pub fn from_sidecar(name: &str, dim: usize, path: &Path) -> Result<Self> {
        let lines: Vec<SidecarLine> = read_jsonl(path)?;
        let mut vectors = HashMap::with_capacity(lines.len());
        for line in lines {
            if line.vector.len() != dim {
                return Err(Error::in_function(
                    &line.id,
                    Error::DimensionMismatch {
                        expected: dim,
                        actual: line.vector.len(),
                    },
                ));
            }
            if line.vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::in_function(
                    &line.id,
                    Error::InvalidArgument("non-finite embedding value".into()),
                ));
            }
            if vectors.insert(line.id.clone(), line.vector).is_some() {
                return Err(Error::DuplicateId(line.id));
            }
        }
        let spec = EmbedderSpec {
            name: name.to_owned(),
            dim,
            params: BTreeMap::from([
                ("kind".to_owned(), EXTERNAL.to_owned()),
                ("source".to_owned(), path.display().to_string()),
            ]),
        };
        Ok(Embedder::External { spec, vectors })
    }

    pub fn spec(&self) -> &EmbedderSpec {
        match self {
            Embedder::BowHash { spec, .. }
            | Embedder::BigramHash { spec, .. }
            | Embedder::External { spec, .. } => spec,
        }
    }

    pub fn dim(&self) -> usize {
        self.spec().dim
    }

    pub fn embed(&self, tokens: &TokenSequence) -> Result<EmbeddingVector> {
        let dim = self.dim();
        let mut values = vec![0.0; dim];
        match self {
            Embedder::BowHash { seed, .. } => {
                for t in &tokens.tokens {
                    values[bucket(*seed, t, dim)] += 1.0;
                }
            }
            Embedder::BigramHash { seed, .. } => {
                let mut key = Vec::new();
                for pair in tokens.tokens.windows(2) {
                    key.clear();
                    key.extend_from_slice(pair[0].as_bytes());
                    key.push(0x1f);
                    key.extend_from_slice(pair[1].as_bytes());
                    values[(seeded_hash(*seed, &key) % dim as u64) as usize] += 1.0;
                }
            }
            Embedder::External { vectors, .. } => {
                let v = vectors
                    .get(&tokens.origin_id)
                    .ok_or_else(|| Error::UnknownId(tokens.origin_id.clone()))?;
                values.copy_from_slice(v);
            }
        }
        l2_normalize(&mut values);
        Ok(EmbeddingVector { values })
    }
}

/// Scales to unit length in place; the zero vector is left untouched.
pub fn l2_normalize(values: &mut [f64]) {
    let n = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        values.iter_mut().for_each(|v| *v /= n);
    }
}

/// Embeds every pool record, ordered by ascending id.
pub fn embed_pool(
    embedder: &Embedder,
    pool: &Pool,
    cfg: &NormalizeConfig,
) -> Result<Vec<(String, EmbeddingVector)>> {
    pool.sorted_ids()
        .into_par_iter()
        .map(|id| {
            let record = pool.require(id)?;
            let tokens = normalize_function(record, cfg).map_err(|e| Error::in_function(id, e))?;
            let v = embedder
                .embed(&tokens)
                .map_err(|e| Error::in_function(id, e))?;
            Ok((id.to_owned(), v))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(ts: &[&str]) -> TokenSequence {
        TokenSequence::from_tokens("t", ts.iter().map(|s| s.to_string()).collect())
    }

    #[test]
    fn identical_sequences_have_cosine_one() {
        let e = Embedder::from_spec(&EmbedderSpec::bow_hash(DEFAULT_DIM, 1)).unwrap();
        let a = e.embed(&toks(&["mov", "rax", "IMM"])).unwrap();
        let b = e.embed(&toks(&["mov", "rax", "IMM"])).unwrap();
        assert_eq!(a, b);
        assert!((cosine(&a.values, &b.values) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_sequence_is_zero_vector() {
        let e = Embedder::from_spec(&EmbedderSpec::bigram_hash(16, 1)).unwrap();
        let v = e.embed(&toks(&["ret"])).unwrap();
        assert!(v.is_zero());
        assert_eq!(cosine(&v.values, &v.values), 0.0);
    }

    #[test]
    fn unknown_embedder() {
        let spec = EmbedderSpec {
            name: "gemini".into(),
            dim: 8,
            params: BTreeMap::new(),
        };
        assert!(matches!(
            Embedder::from_spec(&spec),
            Err(Error::UnknownEmbedder(_))
        ));
    }

    #[test]
    fn spec_display_roundtrip() {
        let spec = EmbedderSpec::bow_hash(64, 9);
        let text = spec.to_string();
        assert_eq!(text, "bow-hash;dim=64;seed=9");
        assert_eq!(EmbedderSpec::parse(&text).unwrap(), spec);
    }

    #[test]
    fn sidecar_dimension_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.jsonl");
        std::fs::write(
            &p,
            "{\"id\":\"a\",\"vector\":[1.0,0.0]}\n{\"id\":\"b\",\"vector\":[1.0]}\n",
        )
        .unwrap();
        assert!(Embedder::from_sidecar("clap", 2, &p).is_err());
        std::fs::write(&p, "{\"id\":\"a\",\"vector\":[3.0,4.0]}\n").unwrap();
        let e = Embedder::from_sidecar("clap", 2, &p).unwrap();
        let v = e.embed(&TokenSequence::from_tokens("a", vec![])).unwrap();
        assert!((v.values[0] - 0.6).abs() < 1e-12 && (v.values[1] - 0.8).abs() < 1e-12);
        assert!(e.embed(&TokenSequence::from_tokens("zz", vec![])).is_err());
    }
}
