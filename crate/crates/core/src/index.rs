//! Exact cosine search over an embedded pool.
//!
//! Rows are unit-normalized on insert, so the similarity of a unit query to a
//! row is a plain dot product. Window queries first bound every row's cosine
//! with a low-precision sketch and compute exact similarities only for rows that can
//! still make the window, so results match a full scan. Ties are broken by
//! ascending id.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::embed::{l2_normalize, EmbedderSpec, EmbeddingVector};
use crate::{Error, Result};

mod sketch;

use sketch::Sketch;

pub const MAGIC: &[u8; 4] = b"RSIM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    embedder: EmbedderSpec,
    dim: usize,
    rows: Vec<f64>,
    ids: Vec<String>,
    position: HashMap<String, usize>,
    /// Derived from `rows`; lets most queries skip the full f64 scan.
    sketch: Sketch,
}

/// Grid that similarities are rounded to, so that cosines which are equal in
/// exact arithmetic but differ in the last bits still tie (and then fall back
/// to id order).
pub const SIMILARITY_RESOLUTION: f64 = 1e-9;

fn snap(sim: f64) -> f64 {
    // `+ 0.0` turns -0.0 into 0.0, which `total_cmp` would otherwise order apart.
    ((sim / SIMILARITY_RESOLUTION).round() * SIMILARITY_RESOLUTION).clamp(-1.0, 1.0) + 0.0
}

/// Dot product with eight independent accumulators so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    const LANES: usize = 8;
    let (ca, ta) = a.as_chunks::<LANES>();
    let (cb, tb) = b.as_chunks::<LANES>();
    let tail: f64 = ta.iter().zip(tb).map(|(x, y)| x * y).sum();
    let mut acc = [0.0f64; LANES];
    for (x, y) in ca.iter().zip(cb) {
        for i in 0..LANES {
            acc[i] += x[i] * y[i];
        }
    }
    acc.iter().sum::<f64>() + tail
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowEntry {
    pub id: String,
    pub similarity: f64,
}

/// The `w` nearest pool functions for one query, most similar first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub query_id: String,
    pub w: usize,
    pub candidates: Vec<WindowEntry>,
}

impl Window {
    pub fn ids(&self) -> impl Iterator<Item = &str> + '_ {
        self.candidates.iter().map(|c| c.id.as_str())
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

fn rank_order(a: (f64, &str), b: (f64, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

impl VectorIndex {
    /// Builds an index from `(id, vector)` pairs; rows are stored in ascending id order.
    pub fn build(embedder: EmbedderSpec, embedded: Vec<(String, EmbeddingVector)>) -> Result<Self> {
        if embedded.is_empty() {
            return Err(Error::InvalidArgument("cannot index an empty pool".into()));
        }
        let dim = embedder.dim;
        let mut embedded = embedded;
        embedded.sort_by(|a, b| a.0.cmp(&b.0));
        let mut rows = Vec::with_capacity(dim * embedded.len());
        let mut ids = Vec::with_capacity(embedded.len());
        let mut position = HashMap::with_capacity(embedded.len());
        for (id, v) in embedded {
            if v.dim() != dim {
                return Err(Error::in_function(
                    &id,
                    Error::DimensionMismatch {
                        expected: dim,
                        actual: v.dim(),
                    },
                ));
            }
            if v.values.iter().any(|x| !x.is_finite()) {
                return Err(Error::in_function(
                    &id,
                    Error::InvalidArgument("non-finite embedding value".into()),
                ));
            }
            let start = rows.len();
            rows.extend_from_slice(&v.values);
            l2_normalize(&mut rows[start..]);
            if position.insert(id.clone(), ids.len()).is_some() {
                return Err(Error::DuplicateId(id));
            }
            ids.push(id);
        }
        let sketch = Sketch::new(&rows, dim);
        Ok(Self {
            embedder,
            dim,
            rows,
            ids,
            position,
            sketch,
        })
    }

    pub fn embedder(&self) -> &EmbedderSpec {
        &self.embedder
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    /// Stored (unit-normalized) vector of a pool member.
    pub fn vector_of(&self, id: &str) -> Option<EmbeddingVector> {
        self.position.get(id).map(|&i| EmbeddingVector {
            values: self.row(i).to_vec(),
        })
    }

    /// Similarity of the query against every row, in row order.
    pub fn similarities(&self, query: &EmbeddingVector) -> Result<Vec<f64>> {
        Ok(match self.unit_query(query)? {
            Some(q) => self
                .rows
                .chunks_exact(self.dim)
                .map(|row| snap(dot(row, &q)))
                .collect(),
            None => vec![0.0; self.len()],
        })
    }

    /// The query scaled to unit length; `None` for the zero vector.
    fn unit_query(&self, query: &EmbeddingVector) -> Result<Option<Vec<f64>>> {
        if query.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: query.dim(),
            });
        }
        let norm = query.norm();
        if norm == 0.0 {
            return Ok(None);
        }
        Ok(Some(query.values.iter().map(|v| v / norm).collect()))
    }

    pub fn query_window(&self, query: &EmbeddingVector, w: usize) -> Result<Window> {
        self.query_window_for("", query, w)
    }

    pub fn query_window_for(
        &self,
        query_id: &str,
        query: &EmbeddingVector,
        w: usize,
    ) -> Result<Window> {
        if w == 0 {
            return Err(Error::InvalidArgument("window size must be >= 1".into()));
        }
        let n = self.len();
        let take = w.min(n);
        // (similarity, row) for every row that can still make the window.
        let mut scored: Vec<(f64, usize)> = match self.unit_query(query)? {
            Some(q) if take < n && !self.sketch.is_empty() => {
                let keep = self.sketch.candidates(&q, take);
                let sims = sketch::exact(&self.rows, self.dim, &q, &keep);
                sims.into_iter().map(snap).zip(keep).collect()
            }
            _ => self.similarities(query)?.into_iter().zip(0..n).collect(),
        };
        let cmp = |a: &(f64, usize), b: &(f64, usize)| {
            rank_order((a.0, &self.ids[a.1]), (b.0, &self.ids[b.1]))
        };
        if take < scored.len() {
            scored.select_nth_unstable_by(take - 1, cmp);
            scored.truncate(take);
        }
        scored.sort_unstable_by(cmp);
        Ok(Window {
            query_id: query_id.to_owned(),
            w,
            candidates: scored
                .into_iter()
                .map(|(similarity, i)| WindowEntry {
                    id: self.ids[i].clone(),
                    similarity,
                })
                .collect(),
        })
    }

    /// `query_window` plus the wall-clock time it took.
    pub fn timed_query(
        &self,
        query_id: &str,
        query: &EmbeddingVector,
        w: usize,
    ) -> Result<(Window, Duration)> {
        let start = Instant::now();
        let window = self.query_window_for(query_id, query, w)?;
        Ok((window, start.elapsed()))
    }

    /// Writes the binary index: `RSIM`, version, dim, count, embedder
    /// descriptor, row-major little-endian `f64` rows, length-prefixed ids.
    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        let name = self.embedder.to_string();
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.dim as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&(self.len() as u64).to_le_bytes())
            .map_err(io)?;
        w.write_all(&(name.len() as u32).to_le_bytes())
            .map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        for v in &self.rows {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        for id in &self.ids {
            w.write_all(&(id.len() as u32).to_le_bytes()).map_err(io)?;
            w.write_all(id.as_bytes()).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::IndexFormat("bad magic".into()));
        }
        let version = u32::from_le_bytes(read_array(&mut r)?);
        if version != FORMAT_VERSION {
            return Err(Error::IndexFormat(format!("unsupported version {version}")));
        }
        let dim = u64::from_le_bytes(read_array(&mut r)?) as usize;
        let count = u64::from_le_bytes(read_array(&mut r)?) as usize;
        let name = read_string(&mut r)?;
        let embedder = EmbedderSpec::parse(&name)?;
        if embedder.dim != dim {
            return Err(Error::IndexFormat(
                "descriptor dim disagrees with header".into(),
            ));
        }
        let mut rows = Vec::with_capacity(dim.saturating_mul(count).min(1 << 28));
        for _ in 0..dim * count {
            rows.push(f64::from_le_bytes(read_array(&mut r)?));
        }
        let mut ids = Vec::with_capacity(count.min(1 << 24));
        let mut position = HashMap::with_capacity(count.min(1 << 24));
        for i in 0..count {
            let id = read_string(&mut r)?;
            if position.insert(id.clone(), i).is_some() {
                return Err(Error::DuplicateId(id));
            }
            ids.push(id);
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)
            .map_err(|e| Error::IndexFormat(e.to_string()))?;
        if !rest.is_empty() {
            return Err(Error::IndexFormat("trailing bytes".into()));
        }
        let sketch = Sketch::new(&rows, dim);
        Ok(Self {
            embedder,
            dim,
            rows,
            ids,
            position,
            sketch,
        })
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::IndexFormat(format!("truncated file: {e}")))
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf)?;
    Ok(buf)
}

fn read_string(r: &mut impl Read) -> Result<String> {
    let len = u32::from_le_bytes(read_array(r)?) as usize;
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::IndexFormat("non-UTF-8 string".into()))
}
