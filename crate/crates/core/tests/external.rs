//! Client side of the out-of-process scorer protocol, exercised against small
//! in-process TCP services.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use resim::normalize::{NormalizeConfig, TokenSequence};
use resim::rerank::{
    rerank_candidates, Endpoint, ExternalConfig, ExternalScorer, LinearScorer, Scorer, TokenPair,
};
use resim::Error;
use serde_json::{json, Value};

/// How the test service answers one request.
#[derive(Clone, Copy)]
enum Mode {
    Jaccard,
    /// Answers NaN (bare, as Python's json module prints it) for this candidate.
    NanFor(&'static str),
    /// Answers `{"id":..,"error":..}` for every request.
    ErrorReply,
    /// Never answers a batch.
    Silent,
    /// Drops the first `n` connections after reading a request.
    DropFirst(usize),
    /// Answers each batch in reverse order.
    Reversed,
    RefuseHandshake,
}

struct Service {
    addr: String,
    connections: Arc<AtomicUsize>,
    requests: Arc<AtomicUsize>,
}

fn jaccard(q: &[String], c: &[String]) -> f64 {
    let a: HashSet<&String> = q.iter().collect();
    let b: HashSet<&String> = c.iter().collect();
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(&b).count();
    inter as f64 / (a.len() + b.len() - inter) as f64
}

fn strings(v: &Value) -> Vec<String> {
    v.as_array()
        .expect("token array")
        .iter()
        .map(|t| t.as_str().expect("string token").to_owned())
        .collect()
}

fn spawn_service(mode: Mode) -> Service {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let connections = Arc::new(AtomicUsize::new(0));
    let requests = Arc::new(AtomicUsize::new(0));
    let (conns, reqs) = (connections.clone(), requests.clone());
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { break };
            let n = conns.fetch_add(1, Ordering::SeqCst);
            let reqs = reqs.clone();
            thread::spawn(move || serve(stream, mode, n, &reqs));
        }
    });
    Service {
        addr,
        connections,
        requests,
    }
}

fn serve(stream: TcpStream, mode: Mode, conn_index: usize, requests: &AtomicUsize) {
    let mut out = stream.try_clone().unwrap();
    let mut lines = BufReader::new(stream).lines();
    let Some(Ok(hello)) = lines.next() else {
        return;
    };
    let hello: Value = serde_json::from_str(&hello).unwrap();
    assert_eq!(hello, json!({ "resim_scorer": 1 }));
    if matches!(mode, Mode::RefuseHandshake) {
        writeln!(out, "{}", json!({ "ok": false, "error": "unsupported" })).unwrap();
        return;
    }
    writeln!(out, "{}", json!({ "ok": true, "name": "jaccard" })).unwrap();

    let mut pending: Vec<String> = Vec::new();
    for line in lines {
        let Ok(line) = line else { return };
        let req: Value = serde_json::from_str(&line).unwrap();
        if req.get("bye").is_some() {
            return;
        }
        requests.fetch_add(1, Ordering::SeqCst);
        let id = req["id"].as_u64().unwrap();
        let (q, c) = (strings(&req["q"]), strings(&req["c"]));
        let reply = match mode {
            Mode::DropFirst(n) if conn_index < n => return,
            Mode::Silent => continue,
            Mode::ErrorReply => json!({ "id": id, "error": "model not loaded" }).to_string(),
            Mode::NanFor(marker) if c.iter().any(|t| t == marker) => {
                format!("{{\"id\":{id},\"score\":NaN}}")
            }
            _ => json!({ "id": id, "score": jaccard(&q, &c) }).to_string(),
        };
        if matches!(mode, Mode::Reversed) {
            // Batches in these tests are written back to back; answer once
            // the batch of four has arrived.
            pending.push(reply);
            if pending.len() == 4 {
                for r in pending.drain(..).rev() {
                    writeln!(out, "{r}").unwrap();
                }
            }
        } else {
            writeln!(out, "{reply}").unwrap();
        }
    }
}

fn client(svc: &Service, timeout: Duration) -> resim::Result<ExternalScorer> {
    let mut cfg = ExternalConfig::new(Endpoint::Tcp(svc.addr.clone()));
    cfg.timeout = timeout;
    ExternalScorer::connect(cfg)
}

fn seq(id: &str, toks: &[&str]) -> TokenSequence {
    TokenSequence::from_tokens(id, toks.iter().map(|s| s.to_string()).collect())
}

fn sample_candidates() -> (TokenSequence, Vec<TokenSequence>) {
    let query = seq(
        "q",
        &[
            "push", "rbp", "mov", "rbp", ",", "rsp", "call", "func", "ret",
        ],
    );
    let cands = vec![
        seq(
            "a",
            &[
                "push", "rbp", "mov", "rbp", ",", "rsp", "call", "func", "ret",
            ],
        ),
        seq("b", &["push", "rbp", "xor", "eax", ",", "eax", "ret"]),
        seq(
            "c",
            &[
                "lea", "rdi", ",", "[", "rip", "+", "IMM", "]", "call", "printf",
            ],
        ),
        seq("d", &["push", "rbp", "mov", "rbp", ",", "rsp", "ret"]),
        seq("e", &["push", "rbp", "xor", "eax", ",", "eax", "ret"]),
        seq("f", &["nop"]),
    ];
    (query, cands)
}

#[test]
fn ranking_matches_in_process_jaccard_scorer() {
    let svc = spawn_service(Mode::Jaccard);
    let ext = client(&svc, Duration::from_secs(10)).unwrap();
    assert_eq!(ext.service_name(), "jaccard");
    assert_eq!(ext.name(), "external:jaccard");

    let local = LinearScorer::from_weights(vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    let (query, cands) = sample_candidates();
    let cfg = NormalizeConfig::default();
    for batch in [1, 4, 50] {
        let remote = rerank_candidates(&ext, &query, &cands, &cfg, batch).unwrap();
        let expected = rerank_candidates(&local, &query, &cands, &cfg, batch).unwrap();
        let ids = |v: &[resim::rerank::ScoredCandidate]| {
            v.iter().map(|s| s.id.clone()).collect::<Vec<_>>()
        };
        assert_eq!(ids(&remote), ids(&expected), "batch {batch}");
        for (r, e) in remote.iter().zip(&expected) {
            assert!((r.raw_score - e.raw_score).abs() < 1e-12);
        }
    }
    // Ties (b and e are identical) fall back to id order.
    let remote = rerank_candidates(&ext, &query, &cands, &cfg, 3).unwrap();
    let pos = |id: &str| remote.iter().position(|s| s.id == id).unwrap();
    assert_eq!(pos("b") + 1, pos("e"));
    assert_eq!(remote[0].id, "a");
}

#[test]
fn batch_of_fifty_gets_fifty_matched_responses() {
    let svc = spawn_service(Mode::Jaccard);
    let ext = client(&svc, Duration::from_secs(10)).unwrap();
    let query = seq("q", &["mov", "eax", ",", "IMM", "ret"]);
    let cands: Vec<TokenSequence> = (0..50)
        .map(|i| {
            let mut toks: Vec<String> = ["mov", "eax", ",", "IMM"]
                .iter()
                .map(|s| s.to_string())
                .collect();
            toks.extend((0..i).map(|j| format!("t{j}")));
            TokenSequence::from_tokens(format!("c{i:02}"), toks)
        })
        .collect();
    let pairs: Vec<TokenPair<'_>> = cands.iter().map(|c| (&query, c)).collect();
    let scored = ext.score_pairs(&pairs).unwrap();
    assert_eq!(scored.len(), 50);
    assert_eq!(svc.requests.load(Ordering::SeqCst), 50);
    for ((_, c), s) in pairs.iter().zip(&scored) {
        assert_eq!(s.id, c.origin_id);
        assert!((s.raw_score - jaccard(&query.tokens, &c.tokens)).abs() < 1e-12);
    }
    // Scores are strictly decreasing with the padding length.
    assert!(scored.windows(2).all(|p| p[0].raw_score > p[1].raw_score));
}

#[test]
fn out_of_order_responses_are_matched_by_id() {
    let svc = spawn_service(Mode::Reversed);
    let ext = client(&svc, Duration::from_secs(10)).unwrap();
    let (query, cands) = sample_candidates();
    let pairs: Vec<TokenPair<'_>> = cands[..4].iter().map(|c| (&query, c)).collect();
    let raw = ext.score_batch(&pairs).unwrap();
    for ((q, c), s) in pairs.iter().zip(raw) {
        assert!((s - jaccard(&q.tokens, &c.tokens)).abs() < 1e-12);
    }
}

#[test]
fn nan_score_is_a_protocol_error_naming_the_candidate() {
    let svc = spawn_service(Mode::NanFor("printf"));
    let ext = client(&svc, Duration::from_secs(10)).unwrap();
    let (query, cands) = sample_candidates();
    let err = rerank_candidates(&ext, &query, &cands, &NormalizeConfig::default(), 8).unwrap_err();
    assert!(matches!(err, Error::Protocol(_)), "{err:?}");
    assert!(err.to_string().contains("`c`"), "{err}");

    // Batch of one: wrapped with the candidate id.
    let err = rerank_candidates(&ext, &query, &cands, &NormalizeConfig::default(), 1).unwrap_err();
    assert!(
        matches!(err, Error::Scoring { ref id, .. } if id == "c"),
        "{err:?}"
    );
}

#[test]
fn error_reply_is_reported() {
    let svc = spawn_service(Mode::ErrorReply);
    let ext = client(&svc, Duration::from_secs(10)).unwrap();
    let (query, cands) = sample_candidates();
    let err = ext.score_batch(&[(&query, &cands[1])]).unwrap_err();
    let msg = err.to_string();
    assert!(
        msg.contains("model not loaded") && msg.contains("`b`"),
        "{msg}"
    );
}

#[test]
fn silent_service_times_out() {
    let svc = spawn_service(Mode::Silent);
    let timeout = Duration::from_millis(200);
    let ext = client(&svc, timeout).unwrap();
    let (query, cands) = sample_candidates();
    let started = std::time::Instant::now();
    let err = ext.score_batch(&[(&query, &cands[0])]).unwrap_err();
    assert!(matches!(err, Error::Timeout(t) if t == timeout), "{err:?}");
    assert!(started.elapsed() < Duration::from_secs(5));
}

#[test]
fn transport_error_is_retried_once() {
    let svc = spawn_service(Mode::DropFirst(1));
    let ext = client(&svc, Duration::from_secs(10)).unwrap();
    let (query, cands) = sample_candidates();
    let raw = ext.score_batch(&[(&query, &cands[3])]).unwrap();
    assert!((raw[0] - jaccard(&query.tokens, &cands[3].tokens)).abs() < 1e-12);
    assert_eq!(svc.connections.load(Ordering::SeqCst), 2);
}

#[test]
fn second_transport_error_surfaces() {
    let svc = spawn_service(Mode::DropFirst(usize::MAX));
    let ext = client(&svc, Duration::from_secs(10)).unwrap();
    let (query, cands) = sample_candidates();
    let err = ext.score_batch(&[(&query, &cands[0])]).unwrap_err();
    assert!(matches!(err, Error::Transport(_)), "{err:?}");
    assert_eq!(svc.connections.load(Ordering::SeqCst), 2);
}

#[test]
fn refused_handshake_fails_to_connect() {
    let svc = spawn_service(Mode::RefuseHandshake);
    let err = client(&svc, Duration::from_secs(10)).unwrap_err();
    assert!(matches!(err, Error::Protocol(_)), "{err:?}");
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    // Bind then drop to get a port nobody listens on.
    let port = TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let cfg = ExternalConfig::new(Endpoint::Tcp(format!("127.0.0.1:{port}")));
    assert!(matches!(
        ExternalScorer::connect(cfg),
        Err(Error::Transport(_))
    ));
}

#[test]
fn endpoint_parsing() {
    assert_eq!(
        Endpoint::parse("localhost:7070").unwrap(),
        Endpoint::Tcp("localhost:7070".into())
    );
    assert_eq!(
        Endpoint::parse("stdio:python -m scorer --model x").unwrap(),
        Endpoint::Stdio(vec![
            "python".into(),
            "-m".into(),
            "scorer".into(),
            "--model".into(),
            "x".into()
        ])
    );
    for bad in ["localhost", ":80", "host:notaport", "stdio:", "stdio:   "] {
        assert!(Endpoint::parse(bad).is_err(), "{bad}");
    }
}

#[test]
fn stdio_service_speaks_the_same_protocol() {
    // A shell loop is enough for a fixed-score service.
    if !std::path::Path::new("/bin/sh").exists() {
        return;
    }
    let script = r#"read hello; echo '{"ok":true,"name":"const"}'; while read line; do case "$line" in *bye*) exit 0;; esac; id=$(echo "$line" | sed 's/^{"id":\([0-9]*\).*/\1/'); echo "{\"id\":$id,\"score\":0.25}"; done"#;
    let cfg = ExternalConfig::new(Endpoint::Stdio(vec![
        "/bin/sh".into(),
        "-c".into(),
        script.into(),
    ]));
    let ext = ExternalScorer::connect(cfg).unwrap();
    assert_eq!(ext.service_name(), "const");
    let (query, cands) = sample_candidates();
    let pairs: Vec<TokenPair<'_>> = cands.iter().map(|c| (&query, c)).collect();
    assert_eq!(ext.score_batch(&pairs).unwrap(), vec![0.25; cands.len()]);
}
