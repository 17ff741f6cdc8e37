//! Reference implementations shared by the integration tests. Everything
//! here is written independently of the library code it checks.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use resim::corpus::FunctionRecord;

pub struct GoldenCase {
    pub name: String,
    pub record: FunctionRecord,
    pub expected: String,
}

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/normalize")
}

/// `.raw` files: an optional `base <hex>` line, `#` comments, then one
/// instruction per line. The matching `.norm` holds one instruction per line.
pub fn load_golden() -> Vec<GoldenCase> {
    let mut raws: Vec<PathBuf> = fs::read_dir(golden_dir())
        .expect("golden directory")
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "raw"))
        .collect();
    raws.sort();
    raws.into_iter()
        .map(|raw| {
            let name = raw.file_stem().unwrap().to_string_lossy().into_owned();
            let text = fs::read_to_string(&raw).unwrap();
            let mut base = 0;
            let mut instructions = Vec::new();
            for line in text.lines() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                if let Some(b) = line.strip_prefix("base ") {
                    base = u64::from_str_radix(b.trim().trim_start_matches("0x"), 16).unwrap();
                } else {
                    instructions.push(line.to_owned());
                }
            }
            let expected = fs::read_to_string(raw.with_extension("norm")).unwrap();
            GoldenCase {
                record: FunctionRecord {
                    id: name.clone(),
                    binary_id: "golden".into(),
                    source_key: name.clone(),
                    compiler: "hand".into(),
                    opt_level: "O0".into(),
                    base_address: base,
                    instructions,
                },
                name,
                expected,
            }
        })
        .collect()
}

/// Plain FNV-1a 64 with the seed folded into the offset basis, then the
/// splitmix64 finalizer.
pub fn reference_hash(seed: u64, bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 14695981039346656037;
    const PRIME: u64 = 1099511628211;
    const GOLDEN: u64 = 0x9E3779B97F4A7C15;
    let mut h = OFFSET ^ seed.wrapping_mul(GOLDEN);
    for b in bytes {
        h = (h ^ *b as u64).wrapping_mul(PRIME);
    }
    let mut z = h;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

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

/// Orders `cos(a, q)` against `cos(b, q)` exactly, for integer-valued vectors.
fn exact_cosine_cmp(a: &[f64], b: &[f64], q: &[f64]) -> std::cmp::Ordering {
    let int = |v: &[f64]| -> Vec<i128> { v.iter().map(|x| *x as i128).collect() };
    let (a, b, q) = (int(a), int(b), int(q));
    let dot = |x: &[i128]| -> i128 { x.iter().zip(&q).map(|(u, v)| u * v).sum() };
    let norm = |x: &[i128]| -> i128 { x.iter().map(|u| u * u).sum() };
    let (da, db) = (dot(&a), dot(&b));
    let (na, nb) = (norm(&a).max(1), norm(&b).max(1));
    // cos = d / sqrt(n); compare d_a * sqrt(n_b) with d_b * sqrt(n_a) via squares.
    match (da.signum(), db.signum()) {
        (x, y) if x != y => x.cmp(&y),
        (0, 0) => std::cmp::Ordering::Equal,
        (s, _) => {
            let lhs = da * da * nb;
            let rhs = db * db * na;
            if s > 0 {
                lhs.cmp(&rhs)
            } else {
                rhs.cmp(&lhs)
            }
        }
    }
}

/// Full sort of integer-valued `(id, vector)` rows by exact cosine desc,
/// id asc; returns the top `w` with floating-point similarities.
pub fn brute_force_top(rows: &[(String, Vec<f64>)], q: &[f64], w: usize) -> Vec<(String, f64)> {
    let mut order: Vec<&(String, Vec<f64>)> = rows.iter().collect();
    order.sort_by(|x, y| exact_cosine_cmp(&y.1, &x.1, q).then(x.0.cmp(&y.0)));
    order
        .into_iter()
        .take(w)
        .map(|(id, v)| (id.clone(), cosine(v, q)))
        .collect()
}

/// DCG with gain `1 / log_base(1 + i)` for 1-based rank `i`.
fn dcg(flags: &[bool], k: usize, base: f64) -> f64 {
    flags
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, r)| **r)
        .map(|(i, _)| 1.0 / (2.0 + i as f64).log(base))
        .sum()
}

pub fn reference_ndcg(flags: &[bool], relevant: usize, k: usize, base: f64) -> f64 {
    let ideal: Vec<bool> = (0..relevant.min(k)).map(|_| true).collect();
    dcg(flags, k, base) / dcg(&ideal, k, base)
}

pub fn reference_recall(flags: &[bool], relevant: usize, k: usize) -> f64 {
    flags.iter().take(k).filter(|r| **r).count() as f64 / relevant as f64
}

pub fn flags_of(ranking: &[String], relevant: &BTreeSet<String>) -> Vec<bool> {
    ranking.iter().map(|id| relevant.contains(id)).collect()
}

/// Every ordering of `items` (Heap's algorithm).
pub fn permutations<T: Clone>(items: &[T]) -> Vec<Vec<T>> {
    let mut a = items.to_vec();
    let n = a.len();
    let mut out = vec![a.clone()];
    let mut c = vec![0; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                a.swap(0, i);
            } else {
                a.swap(c[i], i);
            }
            out.push(a.clone());
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    out
}

pub fn ids(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

pub fn set(xs: &[&str]) -> BTreeSet<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

/// A random window of 1..=8 ids drawn from a universe of 12, plus a non-empty
/// relevant set that may include ids outside the window.
pub fn random_window<R: rand::Rng>(rng: &mut R) -> (Vec<String>, BTreeSet<String>) {
    use rand::seq::SliceRandom;
    let universe: Vec<String> = (0..12).map(|i| format!("f{i:02}")).collect();
    let size = rng.gen_range(1..=8);
    let window: Vec<String> = universe.choose_multiple(rng, size).cloned().collect();
    let mut relevant: BTreeSet<String> = universe
        .iter()
        .filter(|_| rng.gen_bool(0.35))
        .cloned()
        .collect();
    if relevant.is_empty() {
        relevant.insert(universe[rng.gen_range(0..universe.len())].clone());
    }
    (window, relevant)
}

/// Highest nDCG@k and Recall@k over every ordering of `window`.
pub fn best_over_permutations(
    window: &[String],
    relevant: &BTreeSet<String>,
    k: usize,
) -> (f64, f64) {
    permutations(window)
        .iter()
        .fold((0.0f64, 0.0f64), |(n, r), p| {
            let flags = flags_of(p, relevant);
            (
                n.max(reference_ndcg(
                    &flags,
                    relevant.len(),
                    k,
                    std::f64::consts::E,
                )),
                r.max(reference_recall(&flags, relevant.len(), k)),
            )
        })
}

pub fn record(id: &str, key: &str) -> FunctionRecord {
    FunctionRecord {
        id: id.into(),
        binary_id: "bin".into(),
        source_key: key.into(),
        compiler: "gcc".into(),
        opt_level: "O2".into(),
        base_address: 0x1000,
        instructions: vec!["1000 push rbp".into(), "1001 ret".into()],
    }
}

/// Writes precomputed 2-d vectors in the sidecar format.
pub fn sidecar(dir: &Path, name: &str, rows: &[(&str, [f64; 2])]) -> PathBuf {
    use std::io::Write;
    let path = dir.join(name);
    let mut f = fs::File::create(&path).unwrap();
    for (id, v) in rows {
        writeln!(f, "{}", serde_json::json!({ "id": id, "vector": v })).unwrap();
    }
    path
}

pub struct DisjointCoverage {
    pub recall_a: f64,
    pub recall_b: f64,
    pub recall_ensemble: f64,
    pub ensemble_ids: Vec<String>,
}

/// Query `q` with four variants: embedder A places v1, v2 next to the query,
/// embedder B places v3, v4. Each window of five holds the query, two
/// variants and both distractors, so only the union sees every variant.
pub fn disjoint_coverage() -> DisjointCoverage {
    use resim::corpus::Pool;
    use resim::embed::{embed_pool, Embedder};
    use resim::eval::recall_at_k;
    use resim::index::VectorIndex;
    use resim::normalize::NormalizeConfig;
    use resim::pipeline::{Retriever, SearchConfig, SearchEngine, SearchResult};
    use resim::rerank::OracleScorer;

    let pool = Pool::new(
        [
            ("q", "s"),
            ("v1", "s"),
            ("v2", "s"),
            ("v3", "s"),
            ("v4", "s"),
            ("d1", "x"),
            ("d2", "y"),
        ]
        .iter()
        .map(|(id, key)| record(id, key))
        .collect(),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let far = |y: f64| [-1.0, y];
    let a_rows = [
        ("q", [1.0, 0.0]),
        ("v1", [0.99, 0.1]),
        ("v2", [0.98, 0.2]),
        ("v3", far(0.1)),
        ("v4", far(0.2)),
        ("d1", [0.0, 1.0]),
        ("d2", [0.1, 1.0]),
    ];
    let b_rows = [
        ("q", [1.0, 0.0]),
        ("v1", far(0.1)),
        ("v2", far(0.2)),
        ("v3", [0.99, 0.1]),
        ("v4", [0.98, 0.2]),
        ("d1", [0.0, 1.0]),
        ("d2", [0.1, 1.0]),
    ];
    let norm = NormalizeConfig::default();
    let a = Embedder::from_sidecar("ext-a", 2, &sidecar(dir.path(), "a.jsonl", &a_rows)).unwrap();
    let b = Embedder::from_sidecar("ext-b", 2, &sidecar(dir.path(), "b.jsonl", &b_rows)).unwrap();
    let ia = VectorIndex::build(a.spec().clone(), embed_pool(&a, &pool, &norm).unwrap()).unwrap();
    let ib = VectorIndex::build(b.spec().clone(), embed_pool(&b, &pool, &norm).unwrap()).unwrap();
    let ra = Retriever::new(&a, &ia).unwrap();
    let rb = Retriever::new(&b, &ib).unwrap();
    let oracle = OracleScorer::from_pool(&pool);
    let engine = SearchEngine::new(&pool, &norm, &oracle);
    let cfg = SearchConfig::new(5, 5);
    let v = pool.variants_of("q", true).unwrap();
    let recall = |r: &SearchResult| recall_at_k(&r.final_ids().collect::<Vec<_>>(), &v, 5).unwrap();
    let both = engine.ensemble_search("q", &[ra, rb], &cfg).unwrap();
    DisjointCoverage {
        recall_a: recall(&engine.search("q", ra, &cfg).unwrap()),
        recall_b: recall(&engine.search("q", rb, &cfg).unwrap()),
        recall_ensemble: recall(&both),
        ensemble_ids: both.final_ids().map(str::to_owned).collect(),
    }
}
