//! Line-oriented JSON protocol between the engine and external trainers.
//!
//! Every message is a single UTF-8 line terminated by `\n`. A worker first
//! announces itself with `{"hello":"eatnas-worker","proto":1}`, then answers
//! each request line with exactly one response line carrying the same `id`.
//! Workers are reached either by spawning a command and talking over its
//! standard streams (`stdio:CMD`) or over TCP (`HOST:PORT`).

use std::fmt;
use std::io::{self, BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{EvalBudget, EvalPurpose, EvalResult, EvalStatus, Evaluator};
use crate::error::{Error, Result};
use crate::metrics::{model_size, CostModel};
use crate::search_space::{validate, ArchCode, SearchSpaceConfig};
use crate::weight_store::LayerSignature;

pub const PROTOCOL_VERSION: u32 = 1;
pub const WORKER_HELLO: &str = "eatnas-worker";

pub const DEFAULT_SEARCH_TIMEOUT: Duration = Duration::from_secs(900);
pub const DEFAULT_RERANK_TIMEOUT: Duration = Duration::from_secs(3600);
pub const DEFAULT_HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    pub hello: String,
    pub proto: u32,
}

impl Hello {
    pub fn current() -> Self {
        Hello {
            hello: WORKER_HELLO.into(),
            proto: PROTOCOL_VERSION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRequest {
    pub id: u64,
    pub cmd: String,
    pub arch: ArchCode,
    pub epochs: u32,
    pub space: SearchSpaceConfig,
    #[serde(default)]
    pub share: Option<Vec<LayerSignature>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResponse {
    pub id: u64,
    pub status: EvalStatus,
    /// `null` on failed responses.
    #[serde(default)]
    pub accuracy: Option<f64>,
    #[serde(default)]
    pub params: u64,
    #[serde(default)]
    pub multadds: u64,
    #[serde(default)]
    pub detail: String,
}

impl EvalResponse {
    pub fn from_result(id: u64, r: EvalResult) -> Self {
        EvalResponse {
            id,
            status: r.status,
            accuracy: r.accuracy,
            params: r.params,
            multadds: r.multadds,
            detail: r.detail,
        }
    }

    pub fn failed(id: u64, detail: impl Into<String>) -> Self {
        Self::from_result(id, EvalResult::failed(detail))
    }

    fn into_result(self) -> EvalResult {
        match (self.status, self.accuracy) {
            (EvalStatus::Ok, Some(acc)) if (0.0..=1.0).contains(&acc) => EvalResult {
                status: EvalStatus::Ok,
                accuracy: Some(acc),
                params: self.params,
                multadds: self.multadds,
                detail: self.detail,
            },
            (EvalStatus::Ok, _) => EvalResult::failed("protocol violation: ok response without accuracy in [0, 1]"),
            (EvalStatus::Failed, _) => EvalResult::failed(self.detail),
        }
    }
}

/// Where a worker lives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Endpoint {
    /// Spawn `command` through `sh -c "exec ..."` and use its stdin/stdout.
    Stdio { command: String },
    Tcp { address: String },
}

impl FromStr for Endpoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(cmd) = s.strip_prefix("stdio:") {
            if cmd.trim().is_empty() {
                return Err(Error::Config("stdio endpoint needs a command".into()));
            }
            return Ok(Endpoint::Stdio { command: cmd.to_string() });
        }
        match s.rsplit_once(':') {
            Some((host, port)) if !host.is_empty() && port.parse::<u16>().is_ok() => Ok(Endpoint::Tcp {
                address: s.to_string(),
            }),
            _ => Err(Error::Config(format!(
                "endpoint {s:?} is neither stdio:CMD nor HOST:PORT"
            ))),
        }
    }
}

impl TryFrom<String> for Endpoint {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Endpoint> for String {
    fn from(e: Endpoint) -> String {
        e.to_string()
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Stdio { command } => write!(f, "stdio:{command}"),
            Endpoint::Tcp { address } => f.write_str(address),
        }
    }
}

/// One open worker connection: a writer plus a background reader feeding
/// complete lines into a channel so reads can time out.
struct Connection {
    writer: Box<dyn Write + Send>,
    lines: Receiver<io::Result<String>>,
    child: Option<Child>,
    socket: Option<TcpStream>,
}

impl Connection {
    fn open(endpoint: &Endpoint, handshake_timeout: Duration) -> Result<Self> {
        let mut conn = match endpoint {
            Endpoint::Stdio { command } => {
                // exec so that killing the child reaches the worker itself
                let mut child = Command::new("sh")
                    .arg("-c")
                    .arg(format!("exec {command}"))
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()
                    .map_err(|e| Error::Protocol(format!("spawning {command:?}: {e}")))?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                Connection {
                    writer: Box::new(stdin),
                    lines: spawn_line_reader(stdout),
                    child: Some(child),
                    socket: None,
                }
            }
            Endpoint::Tcp { address } => {
                let addr = address
                    .to_socket_addrs()
                    .map_err(|e| Error::Protocol(format!("resolving {address}: {e}")))?
                    .next()
                    .ok_or_else(|| Error::Protocol(format!("{address} resolves to nothing")))?;
                let stream = TcpStream::connect_timeout(&addr, handshake_timeout)
                    .map_err(|e| Error::Protocol(format!("connecting to {address}: {e}")))?;
                stream.set_nodelay(true).ok();
                let read_half = stream
                    .try_clone()
                    .map_err(|e| Error::Protocol(format!("cloning socket: {e}")))?;
                let write_half = stream
                    .try_clone()
                    .map_err(|e| Error::Protocol(format!("cloning socket: {e}")))?;
                Connection {
                    writer: Box::new(write_half),
                    lines: spawn_line_reader(read_half),
                    child: None,
                    socket: Some(stream),
                }
            }
        };
        let line = conn
            .recv(handshake_timeout)
            .map_err(|e| Error::Protocol(format!("handshake: {e}")))?;
        let hello: Hello = serde_json::from_str(&line)
            .map_err(|e| Error::Protocol(format!("handshake: malformed hello {line:?}: {e}")))?;
        if hello.hello != WORKER_HELLO || hello.proto != PROTOCOL_VERSION {
            return Err(Error::Protocol(format!(
                "handshake: expected {WORKER_HELLO} proto {PROTOCOL_VERSION}, got {} proto {}",
                hello.hello, hello.proto
            )));
        }
        Ok(conn)
    }

    fn send(&mut self, line: &str) -> io::Result<()> {
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()
    }

    fn recv(&mut self, timeout: Duration) -> std::result::Result<String, RecvFailure> {
        match self.lines.recv_timeout(timeout) {
            Ok(Ok(line)) => Ok(line),
            Ok(Err(e)) => Err(RecvFailure::Io(e)),
            Err(RecvTimeoutError::Timeout) => Err(RecvFailure::Timeout),
            Err(RecvTimeoutError::Disconnected) => Err(RecvFailure::Closed),
        }
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Some(s) = &self.socket {
            let _ = s.shutdown(std::net::Shutdown::Both);
        }
        if let Some(child) = &mut self.child {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

enum RecvFailure {
    Timeout,
    Closed,
    Io(io::Error),
}

impl fmt::Display for RecvFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RecvFailure::Timeout => f.write_str("timeout"),
            RecvFailure::Closed => f.write_str("connection closed"),
            RecvFailure::Io(e) => write!(f, "read error: {e}"),
        }
    }
}

fn spawn_line_reader<R: io::Read + Send + 'static>(source: R) -> Receiver<io::Result<String>> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let mut reader = BufReader::new(source);
        loop {
            let mut line = String::new();
            match reader.read_line(&mut line) {
                Ok(0) => break,
                Ok(_) => {
                    let trimmed = line.trim_end_matches(['\n', '\r']).to_string();
                    if tx.send(Ok(trimmed)).is_err() {
                        break;
                    }
                }
                Err(e) => {
                    let _ = tx.send(Err(e));
                    break;
                }
            }
        }
    });
    rx
}

/// Evaluator that forwards every request to an external worker.
///
/// Connections are pooled: each in-flight request holds one connection
/// exclusively and returns it to the pool only after a clean exchange. A
/// connection that timed out or misbehaved is dropped (and its process
/// killed), never reused.
pub struct ExternalEvaluator {
    endpoint: Endpoint,
    space: SearchSpaceConfig,
    search_timeout: Duration,
    rerank_timeout: Duration,
    handshake_timeout: Duration,
    deterministic: bool,
    pool: Mutex<Vec<Connection>>,
    next_id: AtomicU64,
}

impl fmt::Debug for ExternalEvaluator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExternalEvaluator")
            .field("endpoint", &self.endpoint)
            .field("search_timeout", &self.search_timeout)
            .field("rerank_timeout", &self.rerank_timeout)
            .finish_non_exhaustive()
    }
}

impl ExternalEvaluator {
    pub fn new(endpoint: Endpoint, space: SearchSpaceConfig) -> Self {
        ExternalEvaluator {
            endpoint,
            space,
            search_timeout: DEFAULT_SEARCH_TIMEOUT,
            rerank_timeout: DEFAULT_RERANK_TIMEOUT,
            handshake_timeout: DEFAULT_HANDSHAKE_TIMEOUT,
            deterministic: false,
            pool: Mutex::new(Vec::new()),
            next_id: AtomicU64::new(1),
        }
    }

    pub fn with_timeouts(mut self, search: Duration, rerank: Duration) -> Self {
        self.search_timeout = search;
        self.rerank_timeout = rerank;
        self
    }

    pub fn with_handshake_timeout(mut self, timeout: Duration) -> Self {
        self.handshake_timeout = timeout;
        self
    }

    /// Declares the worker a pure function of `(arch, epochs)`, which lets
    /// the engine cache its results. Off by default: real training is noisy.
    pub fn assume_deterministic(mut self, yes: bool) -> Self {
        self.deterministic = yes;
        self
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    /// Opens a connection eagerly so a misconfigured endpoint fails fast.
    pub fn connect(&self) -> Result<()> {
        let conn = Connection::open(&self.endpoint, self.handshake_timeout)?;
        self.pool.lock().unwrap().push(conn);
        Ok(())
    }

    fn checkout(&self) -> Result<Connection> {
        if let Some(c) = self.pool.lock().unwrap().pop() {
            return Ok(c);
        }
        Connection::open(&self.endpoint, self.handshake_timeout)
    }

    fn exchange(&self, arch: &ArchCode, budget: EvalBudget, share: Option<&[LayerSignature]>) -> EvalResult {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let request = EvalRequest {
            id,
            cmd: "eval".into(),
            arch: arch.clone(),
            epochs: budget.epochs,
            space: self.space.clone(),
            share: share.map(|s| s.to_vec()),
        };
        let line = match serde_json::to_string(&request) {
            Ok(l) => l,
            Err(e) => return EvalResult::failed(format!("encoding request: {e}")),
        };
        let mut conn = match self.checkout() {
            Ok(c) => c,
            Err(e) => return EvalResult::failed(e.to_string()),
        };
        if let Err(e) = conn.send(&line) {
            return EvalResult::failed(format!("connection closed: {e}"));
        }
        let timeout = match budget.purpose {
            EvalPurpose::Search => self.search_timeout,
            EvalPurpose::Rerank => self.rerank_timeout,
        };
        let reply = match conn.recv(timeout) {
            Ok(r) => r,
            Err(f) => return EvalResult::failed(f.to_string()),
        };
        let response: EvalResponse = match serde_json::from_str(&reply) {
            Ok(r) => r,
            Err(e) => return EvalResult::failed(format!("protocol violation: malformed response: {e}")),
        };
        if response.id != id {
            return EvalResult::failed(format!(
                "protocol violation: response id {} for request {id}",
                response.id
            ));
        }
        self.pool.lock().unwrap().push(conn);
        response.into_result()
    }
}

impl Evaluator for ExternalEvaluator {
    fn id(&self) -> String {
        format!("external({})", self.endpoint)
    }

    fn evaluate(&self, arch: &ArchCode, budget: EvalBudget) -> EvalResult {
        self.exchange(arch, budget, None)
    }

    fn evaluate_shared(&self, arch: &ArchCode, budget: EvalBudget, share: &[LayerSignature]) -> EvalResult {
        self.exchange(arch, budget, Some(share))
    }

    fn is_deterministic(&self) -> bool {
        self.deterministic
    }
}

/// Worker side: writes the handshake, then answers every request line with
/// `handler` until the input ends. Malformed lines get a failed response and
/// the loop carries on.
pub fn serve<R, W, H>(input: R, mut output: W, mut handler: H) -> io::Result<()>
where
    R: BufRead,
    W: Write,
    H: FnMut(&EvalRequest) -> EvalResponse,
{
    writeln!(output, "{}", serde_json::to_string(&Hello::current()).map_err(io::Error::other)?)?;
    output.flush()?;
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = match serde_json::from_str::<EvalRequest>(&line) {
            Ok(req) if req.cmd == "eval" => handler(&req),
            Ok(req) => EvalResponse::failed(req.id, format!("unknown cmd {:?}", req.cmd)),
            Err(e) => {
                let id = serde_json::from_str::<serde_json::Value>(&line)
                    .ok()
                    .and_then(|v| v.get("id").and_then(|i| i.as_u64()))
                    .unwrap_or(0);
                EvalResponse::failed(id, format!("malformed request: {e}"))
            }
        };
        writeln!(output, "{}", serde_json::to_string(&response).map_err(io::Error::other)?)?;
        output.flush()?;
    }
    Ok(())
}

/// Serves every accepted TCP connection on its own thread.
pub fn serve_tcp<H>(listener: TcpListener, handler: H) -> io::Result<()>
where
    H: FnMut(&EvalRequest) -> EvalResponse + Clone + Send + 'static,
{
    for stream in listener.incoming() {
        let stream = stream?;
        let mut h = handler.clone();
        thread::spawn(move || {
            let reader = match stream.try_clone() {
                Ok(s) => BufReader::new(s),
                Err(_) => return,
            };
            let _ = serve(reader, &stream, &mut h);
        });
    }
    Ok(())
}

/// Behaviour of the loopback test worker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EchoConfig {
    /// Accuracy returned for every valid request.
    pub accuracy: f64,
    /// Stop answering (but keep the connection open) after this many requests.
    pub hang_after: Option<u64>,
    /// Answer with `id + 1` instead of the request id.
    pub corrupt_ids: bool,
}

impl Default for EchoConfig {
    fn default() -> Self {
        EchoConfig {
            accuracy: 0.5,
            hang_after: None,
            corrupt_ids: false,
        }
    }
}

/// Handler for the echo worker: a fixed accuracy with analytic sizes, so the
/// protocol can be exercised without any training.
pub fn echo_handler(cfg: EchoConfig) -> impl FnMut(&EvalRequest) -> EvalResponse + Clone + Send + 'static {
    let served = Arc::new(AtomicU64::new(0));
    move |req: &EvalRequest| {
        let n = served.fetch_add(1, Ordering::SeqCst);
        if cfg.hang_after.is_some_and(|limit| n >= limit) {
            loop {
                thread::sleep(Duration::from_secs(3600));
            }
        }
        let id = if cfg.corrupt_ids { req.id.wrapping_add(1) } else { req.id };
        if req.epochs == 0 {
            return EvalResponse::failed(id, "epochs must be at least 1");
        }
        if let Err(v) = validate(&req.arch, &req.space) {
            let detail: Vec<String> = v.iter().map(|v| v.to_string()).collect();
            return EvalResponse::failed(id, detail.join("; "));
        }
        let size = model_size(&req.arch, &req.space, CostModel::WITH_BATCH_NORM);
        EvalResponse::from_result(id, EvalResult::ok(cfg.accuracy, size.params, size.multadds))
    }
}
