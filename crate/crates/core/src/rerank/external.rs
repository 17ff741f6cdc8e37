//! Client for out-of-process scorers.
//!
//! Newline-delimited JSON over TCP or a child process's stdio:
//!
//! ```text
//! -> {"resim_scorer":1}                  <- {"ok":true,"name":"jaccard"}
//! -> {"id":0,"q":[...],"c":[...]}        <- {"id":0,"score":0.42}
//! -> {"bye":true}
//! ```
//!
//! A batch is written as contiguous requests; responses may come back in any
//! order but every id must be answered exactly once with a finite score.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde::Serialize;
use serde_json::Value;

use super::{ScoredCandidate, Scorer, TokenPair};
use crate::{Error, Result};

pub const PROTOCOL_VERSION: u64 = 1;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Tcp(String),
    /// Program and arguments of a service speaking the protocol on stdio.
    Stdio(Vec<String>),
}

impl Endpoint {
    /// `host:port` or `stdio:<command line>`.
    pub fn parse(text: &str) -> Result<Self> {
        if let Some(cmd) = text.strip_prefix("stdio:") {
            let argv: Vec<String> = cmd.split_whitespace().map(str::to_owned).collect();
            if argv.is_empty() {
                return Err(Error::InvalidArgument("empty stdio command".into()));
            }
            return Ok(Endpoint::Stdio(argv));
        }
        if text
            .rsplit_once(':')
            .is_some_and(|(h, p)| !h.is_empty() && p.parse::<u16>().is_ok())
        {
            Ok(Endpoint::Tcp(text.to_owned()))
        } else {
            Err(Error::InvalidArgument(format!(
                "bad scorer endpoint `{text}`"
            )))
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExternalConfig {
    pub endpoint: Endpoint,
    /// Deadline for a whole batch (and for the handshake).
    pub timeout: Duration,
}

impl ExternalConfig {
    pub fn new(endpoint: Endpoint) -> Self {
        Self {
            endpoint,
            timeout: DEFAULT_TIMEOUT,
        }
    }
}

struct Connection {
    writer: Box<dyn Write + Send>,
    lines: Receiver<std::io::Result<String>>,
    child: Option<Child>,
    service_name: String,
}

impl Connection {
    fn open(cfg: &ExternalConfig) -> Result<Self> {
        let (tx, lines) = mpsc::channel();
        let (writer, child): (Box<dyn Write + Send>, Option<Child>) = match &cfg.endpoint {
            Endpoint::Tcp(addr) => {
                let stream = TcpStream::connect(addr)
                    .map_err(|e| Error::Transport(format!("{addr}: {e}")))?;
                let _ = stream.set_nodelay(true);
                let read_half = stream
                    .try_clone()
                    .map_err(|e| Error::Transport(e.to_string()))?;
                spawn_reader(BufReader::new(read_half), tx);
                (Box::new(stream), None)
            }
            Endpoint::Stdio(argv) => {
                let mut child = Command::new(&argv[0])
                    .args(&argv[1..])
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .spawn()
                    .map_err(|e| Error::Transport(format!("{}: {e}", argv[0])))?;
                let stdout = child.stdout.take().expect("piped stdout");
                let stdin = child.stdin.take().expect("piped stdin");
                spawn_reader(BufReader::new(stdout), tx);
                (Box::new(stdin), Some(child))
            }
        };
        let mut conn = Connection {
            writer,
            lines,
            child,
            service_name: String::new(),
        };
        conn.handshake(cfg.timeout)?;
        Ok(conn)
    }

    fn send(&mut self, value: &impl Serialize) -> Result<()> {
        let mut line = serde_json::to_vec(value)?;
        line.push(b'\n');
        self.writer
            .write_all(&line)
            .map_err(|e| Error::Transport(e.to_string()))
    }

    fn flush(&mut self) -> Result<()> {
        self.writer
            .flush()
            .map_err(|e| Error::Transport(e.to_string()))
    }

    fn recv(&self, deadline: Instant, timeout: Duration) -> Result<String> {
        let left = deadline.saturating_duration_since(Instant::now());
        match self.lines.recv_timeout(left) {
            Ok(Ok(line)) => Ok(line),
            Ok(Err(e)) => Err(Error::Transport(e.to_string())),
            Err(RecvTimeoutError::Timeout) => Err(Error::Timeout(timeout)),
            Err(RecvTimeoutError::Disconnected) => {
                Err(Error::Transport("connection closed by scorer".into()))
            }
        }
    }

    fn handshake(&mut self, timeout: Duration) -> Result<()> {
        self.send(&serde_json::json!({ "resim_scorer": PROTOCOL_VERSION }))?;
        self.flush()?;
        let line = self.recv(Instant::now() + timeout, timeout)?;
        let v: Value = serde_json::from_str(&line)
            .map_err(|e| Error::Protocol(format!("bad handshake reply: {e}")))?;
        if v.get("ok") != Some(&Value::Bool(true)) {
            return Err(Error::Protocol(format!("handshake refused: {line}")));
        }
        self.service_name = v
            .get("name")
            .and_then(Value::as_str)
            .unwrap_or("external")
            .to_owned();
        Ok(())
    }

    fn score(
        &mut self,
        first_id: u64,
        pairs: &[TokenPair<'_>],
        timeout: Duration,
    ) -> Result<Vec<f64>> {
        #[derive(Serialize)]
        struct Request<'a> {
            id: u64,
            q: &'a [String],
            c: &'a [String],
        }
        for (i, (q, c)) in pairs.iter().enumerate() {
            self.send(&Request {
                id: first_id + i as u64,
                q: &q.tokens,
                c: &c.tokens,
            })?;
        }
        self.flush()?;

        let deadline = Instant::now() + timeout;
        let mut scores: Vec<Option<f64>> = vec![None; pairs.len()];
        let mut answered = 0;
        while answered < pairs.len() {
            let line = self.recv(deadline, timeout)?;
            let (id, score) = parse_response(&line)?;
            let slot = id
                .checked_sub(first_id)
                .map(|i| i as usize)
                .filter(|&i| i < pairs.len())
                .ok_or_else(|| Error::Protocol(format!("response for unknown id {id}")))?;
            let pair_id = &pairs[slot].1.origin_id;
            let score = score.map_err(|msg| {
                Error::Protocol(format!("request {id} (candidate `{pair_id}`): {msg}"))
            })?;
            if scores[slot].replace(score).is_some() {
                return Err(Error::Protocol(format!("id {id} answered twice")));
            }
            answered += 1;
        }
        Ok(scores.into_iter().map(|s| s.unwrap_or(f64::NAN)).collect())
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        let _ = self.send(&serde_json::json!({ "bye": true }));
        let _ = self.flush();
        if let Some(child) = self.child.as_mut() {
            let deadline = Instant::now() + Duration::from_secs(1);
            while Instant::now() < deadline {
                if let Ok(Some(_)) = child.try_wait() {
                    return;
                }
                thread::sleep(Duration::from_millis(10));
            }
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

fn spawn_reader<R: BufRead + Send + 'static>(reader: R, tx: mpsc::Sender<std::io::Result<String>>) {
    thread::spawn(move || {
        for line in reader.lines() {
            let stop = line.is_err();
            if tx.send(line).is_err() || stop {
                break;
            }
        }
    });
}

/// Returns the id and either the score or a description of what is wrong
/// with it. Services that print bare `NaN`/`Infinity` (not JSON) still get
/// their id reported.
fn parse_response(line: &str) -> Result<(u64, std::result::Result<f64, String>)> {
    let v: Value = match serde_json::from_str(line) {
        Ok(v) => v,
        Err(_) => {
            let patched = line
                .replace("-Infinity", "null")
                .replace("Infinity", "null")
                .replace("NaN", "null");
            serde_json::from_str(&patched)
                .map_err(|e| Error::Protocol(format!("malformed response `{line}`: {e}")))?
        }
    };
    let id = v
        .get("id")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::Protocol(format!("response without id: `{line}`")))?;
    if let Some(err) = v.get("error") {
        return Ok((id, Err(format!("service error: {err}"))));
    }
    let score = match v.get("score") {
        Some(Value::Number(n)) => n.as_f64().filter(|s| s.is_finite()),
        _ => None,
    };
    Ok((
        id,
        score.ok_or_else(|| "missing or non-finite score".to_owned()),
    ))
}

/// Scorer backed by an external service. Batches on one client are
/// serialized; open several clients for parallel connections.
pub struct ExternalScorer {
    cfg: ExternalConfig,
    state: Mutex<ClientState>,
}

#[derive(Default)]
struct ClientState {
    conn: Option<Connection>,
    next_id: u64,
}

impl ExternalScorer {
    /// Connects eagerly so handshake failures surface immediately.
    pub fn connect(cfg: ExternalConfig) -> Result<Self> {
        let conn = Connection::open(&cfg)?;
        Ok(Self {
            cfg,
            state: Mutex::new(ClientState {
                conn: Some(conn),
                next_id: 0,
            }),
        })
    }

    pub fn service_name(&self) -> String {
        let state = self.state.lock().unwrap_or_else(|p| p.into_inner());
        state
            .conn
            .as_ref()
            .map(|c| c.service_name.clone())
            .unwrap_or_default()
    }

    /// One [`ScoredCandidate`] per pair, in input order.
    pub fn score_pairs(&self, pairs: &[TokenPair<'_>]) -> Result<Vec<ScoredCandidate>> {
        let raw = self.score_batch(pairs)?;
        Ok(pairs
            .iter()
            .zip(raw)
            .map(|((_, c), s)| ScoredCandidate::new(c.origin_id.clone(), s))
            .collect())
    }

    fn attempt(&self, state: &mut ClientState, pairs: &[TokenPair<'_>]) -> Result<Vec<f64>> {
        if state.conn.is_none() {
            state.conn = Some(Connection::open(&self.cfg)?);
        }
        let first = state.next_id;
        state.next_id += pairs.len() as u64;
        let conn = state.conn.as_mut().expect("connection just opened");
        let out = conn.score(first, pairs, self.cfg.timeout);
        if out.is_err() {
            // Stale responses would corrupt the next batch.
            state.conn = None;
        }
        out
    }
}

impl Scorer for ExternalScorer {
    fn name(&self) -> String {
        format!("external:{}", self.service_name())
    }

    fn score_batch(&self, pairs: &[TokenPair<'_>]) -> Result<Vec<f64>> {
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        let mut state = self.state.lock().unwrap_or_else(|p| p.into_inner());
        match self.attempt(&mut state, pairs) {
            Err(Error::Transport(msg)) => {
                log::warn!("scorer transport error ({msg}); reconnecting once");
                self.attempt(&mut state, pairs)
            }
            other => other,
        }
    }
}

impl std::fmt::Debug for ExternalScorer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalScorer")
            .field("endpoint", &self.cfg.endpoint)
            .finish()
    }
}
