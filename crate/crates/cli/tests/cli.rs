use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn resim(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_resim"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("failed to run resim")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("killed by a signal")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = resim(dir, args);
    assert_eq!(code(&out), 0, "resim {args:?} failed: {}", stderr(&out));
    out
}

/// A small corpus with two indexes, in a fresh directory.
struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path();
        ok(p, &["synth", "--classes", "30", "--seed", "5", "--out", "c.jsonl", "--queries-out", "q.jsonl"]);
        ok(p, &["index", "build", "--corpus", "c.jsonl", "--out", "a.idx"]);
        ok(
            p,
            &["index", "build", "--corpus", "c.jsonl", "--embedder", "bigram-hash;dim=64;seed=2", "--out", "b.idx"],
        );
        Self { dir }
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }

    fn file(&self, name: &str) -> PathBuf {
        self.path().join(name)
    }

    fn read(&self, name: &str) -> String {
        std::fs::read_to_string(self.file(name)).unwrap()
    }

    fn json(&self, name: &str) -> Value {
        serde_json::from_str(&self.read(name)).unwrap()
    }

    fn lines(&self, name: &str) -> Vec<Value> {
        self.read(name)
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    }

    fn script(&self, name: &str, body: &str) -> String {
        let path = self.file(name);
        std::fs::write(&path, body).unwrap();
        format!("external:stdio:/bin/sh {}", path.display())
    }
}

const QUERY: &[&str] = &["query", "--corpus", "c.jsonl", "--index", "a.idx", "--queries", "q.jsonl"];

fn with<'a>(base: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
    base.iter().chain(extra).copied().collect()
}

#[test]
fn query_output_is_reproducible() {
    let f = Fixture::new();
    let p = f.path();
    ok(p, &with(QUERY, &["-w", "20", "-k", "5", "--out", "r1.jsonl", "--report", "t.json"]));
    ok(p, &with(QUERY, &["-w", "20", "-k", "5", "--out", "r2.jsonl"]));
    ok(p, &with(QUERY, &["-w", "20", "-k", "5", "--out", "r3.jsonl", "--jobs", "3", "--no-token-cache"]));
    let first = f.read("r1.jsonl");
    assert_eq!(first, f.read("r2.jsonl"));
    assert_eq!(first, f.read("r3.jsonl"));

    let results = f.lines("r1.jsonl");
    assert_eq!(results.len(), 30);
    for r in &results {
        assert_eq!(r["final"].as_array().unwrap().len(), 5);
        assert!(r.get("timing").is_none());
    }
    let report = f.json("t.json");
    assert_eq!(report["queries"].as_array().unwrap().len(), 30);
    assert!(report["mean"]["t_rho"].as_f64().unwrap() > 0.0);
}

#[test]
fn artifacts_get_one_manifest_each() {
    let f = Fixture::new();
    ok(f.path(), &with(QUERY, &["-w", "10", "-k", "5", "--out", "r.jsonl"]));
    let m = f.json("r.jsonl.manifest.json");
    assert_eq!(m["command"], "query");
    assert_eq!(m["config"]["search"]["w"], 10);
    assert_eq!(m["outputs"], serde_json::json!(["r.jsonl"]));
    assert_eq!(m["inputs"], serde_json::json!(["c.jsonl", "a.idx", "q.jsonl"]));
    assert!(m["wall_clock_secs"].as_f64().unwrap() >= 0.0);

    let synth = f.json("c.jsonl.manifest.json");
    assert_eq!(synth["seeds"]["synth"], 5);
    assert_eq!(synth["outputs"], serde_json::json!(["c.jsonl", "q.jsonl"]));
    let index = f.json("b.idx.manifest.json");
    assert_eq!(index["seeds"]["embedder"], 2);
}

#[test]
fn eval_prints_a_json_report() {
    let f = Fixture::new();
    ok(f.path(), &with(QUERY, &["-w", "20", "-k", "10", "--out", "r.jsonl"]));
    let out = ok(f.path(), &["eval", "--run", "r.jsonl", "--ks", "5"]);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["ks"], serde_json::json!([5]));
    assert_eq!(report["mean"]["queries"], 30);
    let ndcg = report["mean"]["ndcg"]["5"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&ndcg));

    // Re-ranking a window never beats the oracle ordering of that window.
    let oracle = report["mean"]["oracle_ndcg"]["5"].as_f64().unwrap();
    assert!(ndcg <= oracle + 1e-12);

    ok(f.path(), &["eval", "--run", "r.jsonl", "--ks", "5,10", "--embedding-only", "--out", "base.json"]);
    let out = ok(f.path(), &["eval", "--run", "r.jsonl", "--ks", "5,10", "--baseline", "base.json"]);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["improvement"]["ndcg_pct"].get("10").is_some());
    assert!(f.file("base.json.manifest.json").exists());

    let table = ok(f.path(), &["eval", "--run", "r.jsonl", "--ks", "5", "--table"]);
    let table = String::from_utf8(table.stdout).unwrap();
    assert!(table.contains("nDCG") && table.contains("@5"));
}

#[test]
fn k_larger_than_w_is_a_usage_error() {
    let f = Fixture::new();
    let out = resim(f.path(), &with(QUERY, &["-w", "10", "-k", "20"]));
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("k must be ≤ w"), "{}", stderr(&out));
    assert!(out.stdout.is_empty());
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["frobnicate"],
        vec!["query", "--corpus", "c.jsonl"],
        vec!["eval", "--run", "r.jsonl", "--ks", "0"],
        vec!["query", "--corpus", "c", "--index", "i", "--query-id", "x", "--scorer", "magic"],
        vec!["ensemble-query", "--corpus", "c", "--index", "i", "--query-id", "x"],
        vec!["sweep", "--corpus", "c", "--index", "i", "--query-id", "x", "-w", "50,30"],
    ] {
        let out = resim(dir.path(), &args);
        assert_eq!(code(&out), 1, "{args:?}: {}", stderr(&out));
    }
    assert_eq!(code(&resim(dir.path(), &["--help"])), 0);
}

#[test]
fn missing_input_is_a_data_error_naming_the_path() {
    let f = Fixture::new();
    let out = resim(f.path(), &["query", "--corpus", "absent.jsonl", "--index", "a.idx", "--query-id", "x", "-w", "5", "-k", "5"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("absent.jsonl"), "{}", stderr(&out));

    let out = resim(f.path(), &["eval", "--run", "gone.jsonl", "--ks", "5"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("gone.jsonl"));

    let out = resim(f.path(), &with(QUERY, &["--query-id", "no_such_fn", "-w", "5", "-k", "5"]));
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("no_such_fn"));
}

#[test]
fn scorer_service_failures_exit_with_three() {
    let f = Fixture::new();
    // Nothing listens on port 1.
    let out = resim(f.path(), &with(QUERY, &["-w", "5", "-k", "5", "--scorer", "external:127.0.0.1:1"]));
    assert_eq!(code(&out), 3, "{}", stderr(&out));

    let nan = f.script(
        "nan.sh",
        r#"read hello; echo '{"ok":true,"name":"nan"}'; while read line; do id=$(echo "$line" | sed 's/^{"id":\([0-9]*\).*/\1/'); echo "{\"id\":$id,\"score\":\"NaN\"}"; done"#,
    );
    let out = resim(f.path(), &with(QUERY, &["-w", "5", "-k", "5", "--scorer", &nan]));
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn external_scorer_over_stdio() {
    let f = Fixture::new();
    let constant = f.script(
        "const.sh",
        r#"read hello; echo '{"ok":true,"name":"const"}'; while read line; do case "$line" in *bye*) exit 0;; esac; id=$(echo "$line" | sed 's/^{"id":\([0-9]*\).*/\1/'); echo "{\"id\":$id,\"score\":0.5}"; done"#,
    );
    ok(
        f.path(),
        &["query", "--corpus", "c.jsonl", "--index", "a.idx", "--query-id", "c00003_v1", "-w", "8", "-k", "4", "--scorer", &constant, "--out", "r.jsonl"],
    );
    let r = &f.lines("r.jsonl")[0];
    // Equal scores fall back to ascending id.
    let mut window: Vec<&str> = r["windows"][0]["window"]["candidates"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["id"].as_str().unwrap())
        .collect();
    window.sort_unstable();
    let ranked: Vec<&str> = r["final"].as_array().unwrap().iter().map(|c| c["id"].as_str().unwrap()).collect();
    assert_eq!(ranked, window[..4]);
    for c in r["final"].as_array().unwrap() {
        assert_eq!(c["raw_score"], 0.5);
    }
}

#[test]
fn ensemble_query_merges_windows() {
    let f = Fixture::new();
    ok(
        f.path(),
        &["ensemble-query", "--corpus", "c.jsonl", "--index", "a.idx", "--index", "b.idx", "--queries", "q.jsonl", "-w", "6", "-k", "6", "--out", "e.jsonl"],
    );
    ok(
        f.path(),
        &with(QUERY, &["--ensemble", "b.idx", "-w", "6", "-k", "6", "--out", "e2.jsonl"]),
    );
    assert_eq!(f.read("e.jsonl"), f.read("e2.jsonl"));
    for r in f.lines("e.jsonl") {
        assert_eq!(r["windows"].as_array().unwrap().len(), 2);
        let ids: Vec<&str> = r["final"].as_array().unwrap().iter().map(|c| c["id"].as_str().unwrap()).collect();
        let mut unique = ids.clone();
        unique.sort_unstable();
        unique.dedup();
        assert_eq!(unique.len(), ids.len());
    }
}

#[test]
fn mining_training_and_the_trained_scorer() {
    let f = Fixture::new();
    let p = f.path();
    ok(p, &["mine-triplets", "--corpus", "c.jsonl", "--anchors", "q.jsonl", "--index", "a.idx", "--index", "b.idx", "--seed", "9", "--out", "t.jsonl"]);
    ok(p, &["mine-triplets", "--corpus", "c.jsonl", "--anchors", "q.jsonl", "--index", "a.idx", "--index", "b.idx", "--seed", "9", "--out", "t2.jsonl"]);
    assert_eq!(f.read("t.jsonl"), f.read("t2.jsonl"));
    let triplets = f.lines("t.jsonl");
    assert_eq!(triplets.len(), 60);
    assert!(triplets.iter().all(|t| t["seed"] == 9 && t["mining_depth"] == 10));

    ok(p, &["train-scorer", "--corpus", "c.jsonl", "--triplets", "t.jsonl", "--out", "m.json"]);
    let model = f.json("m.json");
    assert_eq!(model["weights"].as_array().unwrap().len(), 6);
    for key in ["margin", "seed", "epochs", "lr"] {
        assert!(model.get(key).is_some(), "model lacks {key}");
    }
    let summary = &f.json("m.json.manifest.json")["summary"];
    assert!(summary["final_mean_loss"].as_f64().unwrap() < summary["initial_mean_loss"].as_f64().unwrap());

    ok(p, &with(QUERY, &["-w", "10", "-k", "5", "--scorer", "linear:m.json", "--out", "r.jsonl"]));
    assert_eq!(f.lines("r.jsonl").len(), 30);
}

#[test]
fn sweep_and_bench() {
    let f = Fixture::new();
    ok(
        f.path(),
        &["sweep", "--corpus", "c.jsonl", "--index", "a.idx", "--queries", "q.jsonl", "-w", "5,10,20", "-k", "5", "--ks", "5", "--out", "s.json", "--report", "st.json"],
    );
    let sweep = f.json("s.json");
    let rows = sweep["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].get("mean_t_rho").is_none() && sweep.get("t_rho_fit").is_none());
    // With k fixed, a wider window can only raise the oracle bound.
    let bound: Vec<f64> = rows.iter().map(|r| r["reranked"]["oracle_recall"]["5"].as_f64().unwrap()).collect();
    assert!(bound.windows(2).all(|b| b[0] <= b[1] + 1e-12), "{bound:?}");
    let timing = f.json("st.json");
    assert_eq!(timing["rows"].as_array().unwrap().len(), 3);

    let out = ok(f.path(), &["bench", "--corpus", "c.jsonl", "--index", "a.idx", "-w", "5,10", "-k", "5", "--limit", "4"]);
    let bench: Value = serde_json::from_slice(&out.stdout).unwrap();
    for row in bench["rows"].as_array().unwrap() {
        assert!(row["mean_t_rho"].as_f64().unwrap() > 0.0);
    }
}

#[test]
fn ingest_normalize_and_index_query() {
    let f = Fixture::new();
    let p = f.path();
    ok(p, &["ingest", "--in", "c.jsonl", "--out", "c2.jsonl", "--queries", "q.jsonl"]);
    assert_eq!(f.read("c.jsonl"), f.read("c2.jsonl"));

    ok(p, &["normalize", "--in", "c.jsonl", "--out", "tok.jsonl"]);
    let lines = f.lines("tok.jsonl");
    assert_eq!(lines.len(), 150);
    let ids: Vec<&str> = lines.iter().map(|l| l["id"].as_str().unwrap()).collect();
    assert!(ids.windows(2).all(|w| w[0] < w[1]));
    assert!(lines.iter().all(|l| !l["tokens"].as_array().unwrap().is_empty()));

    let out = ok(p, &["index", "query", "--index", "a.idx", "--query-id", "c00002_v0", "-w", "3"]);
    let window: Value = serde_json::from_slice(&out.stdout).unwrap();
    let cands = window["candidates"].as_array().unwrap();
    assert_eq!(cands.len(), 3);
    assert_eq!(cands[0]["id"], "c00002_v0");
    assert_eq!(cands[0]["similarity"], 1.0);
}

#[test]
fn sidecar_index() {
    let f = Fixture::new();
    let p = f.path();
    let out = ok(p, &["normalize", "--in", "c.jsonl", "--out", "tok.jsonl"]);
    drop(out);
    // Two-dimensional vectors: the class number and a constant.
    let rows: String = f
        .lines("tok.jsonl")
        .iter()
        .map(|l| {
            let id = l["id"].as_str().unwrap();
            let class: f64 = id[1..6].parse().unwrap();
            format!("{{\"id\":\"{id}\",\"vector\":[{},1.0]}}\n", class + 1.0)
        })
        .collect();
    std::fs::write(f.file("side.jsonl"), rows).unwrap();
    let side = f.file("side.jsonl");
    ok(p, &["index", "build", "--corpus", "c.jsonl", "--sidecar", side.to_str().unwrap(), "--name", "toy", "--dim", "2", "--out", "s.idx"]);
    ok(p, &["query", "--corpus", "c.jsonl", "--index", "s.idx", "--query-id", "c00004_v2", "-w", "5", "-k", "5", "--scorer", "oracle", "--out", "r.jsonl"]);
    let r = &f.lines("r.jsonl")[0];
    let ids: Vec<&str> = r["final"].as_array().unwrap().iter().map(|c| c["id"].as_str().unwrap()).collect();
    assert!(ids.iter().all(|id| id.starts_with("c00004")), "{ids:?}");

    let out = resim(p, &["index", "build", "--corpus", "c.jsonl", "--sidecar", side.to_str().unwrap(), "--name", "toy", "--dim", "3", "--out", "bad.idx"]);
    assert_eq!(code(&out), 2);
}
