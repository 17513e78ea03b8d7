//! Classifier served by an external process over line-delimited JSON.
//!
//! The child writes a `hello` line declaring its shape, then answers each
//! `predict` request with exactly one `scores` or `error` line carrying the
//! same id. Requests are strictly sequential. Closing stdin asks the child
//! to exit.
//!
//! ```text
//! child  -> {"type":"hello","class_count":C,"variables":V,"timesteps":T}
//! engine -> {"type":"predict","id":n,"samples":[[[..T..] x V] x B]}
//! child  -> {"type":"scores","id":n,"scores":[[..C..] x B]}
//!         | {"type":"error","id":n,"message":"..."}
//! ```

use std::io::{self, BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{ClassifierHandle, PredictionRule, ScoreError, Scorer};
use crate::series::{MultivariateSeries, Shape};

pub const DEFAULT_STARTUP_TIMEOUT_MS: u64 = 10_000;
pub const DEFAULT_REQUEST_TIMEOUT_MS: u64 = 30_000;

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("invalid bridge configuration: {0}")]
    Config(String),
    #[error("failed to spawn {command}: {source}")]
    Spawn {
        command: String,
        #[source]
        source: io::Error,
    },
    #[error("model process sent no hello within {0} ms")]
    HandshakeTimeout(u64),
    #[error("model process declared {field} = {declared}, expected {expected}")]
    DeclarationMismatch {
        field: &'static str,
        declared: usize,
        expected: usize,
    },
    #[error("model process exited {0}")]
    ChildExited(String),
    #[error("protocol error: {message} in line {line:?}")]
    Protocol { line: String, message: String },
    #[error("no response to request {id} within {ms} ms")]
    Timeout { id: u64, ms: u64 },
    #[error("response id {got} does not match request id {expected}")]
    IdMismatch { expected: u64, got: u64 },
    #[error("model process failed request {id}: {message}")]
    Remote { id: u64, message: String },
    #[error("bridge unusable after an earlier failure")]
    Broken,
    #[error("bridge I/O: {0}")]
    Io(#[from] io::Error),
}

/// How to launch and talk to a model process.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BridgeConfig {
    pub command: Vec<String>,
    pub startup_timeout_ms: u64,
    pub request_timeout_ms: u64,
}

impl BridgeConfig {
    pub fn new(command: Vec<String>) -> Self {
        Self {
            command,
            startup_timeout_ms: DEFAULT_STARTUP_TIMEOUT_MS,
            request_timeout_ms: DEFAULT_REQUEST_TIMEOUT_MS,
        }
    }

    /// Whitespace-separated program and arguments.
    pub fn from_command_line(line: &str) -> Self {
        Self::new(line.split_whitespace().map(str::to_string).collect())
    }

    fn validate(&self) -> Result<(), BridgeError> {
        if self.command.is_empty() {
            return Err(BridgeError::Config("command is empty".into()));
        }
        if self.startup_timeout_ms == 0 || self.request_timeout_ms == 0 {
            return Err(BridgeError::Config("timeouts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum ChildMessage {
    Hello {
        class_count: usize,
        variables: usize,
        timesteps: usize,
    },
    Scores {
        id: u64,
        scores: Vec<Vec<f64>>,
    },
    Error {
        #[serde(default)]
        id: Option<u64>,
        message: String,
    },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum EngineMessage {
    Predict {
        id: u64,
        samples: Vec<Vec<Vec<f64>>>,
    },
}

enum Line {
    Text(String),
    Failed(io::Error),
}

struct Connection {
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<Line>,
    next_id: u64,
    broken: bool,
}

impl Connection {
    fn recv(&mut self, timeout: Duration) -> Result<Option<String>, BridgeError> {
        match self.lines.recv_timeout(timeout) {
            Ok(Line::Text(l)) => Ok(Some(l)),
            Ok(Line::Failed(e)) => Err(BridgeError::Io(e)),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => {
                let status = wait_briefly(&mut self.child);
                Err(BridgeError::ChildExited(status))
            }
        }
    }

    fn request(
        &mut self,
        batch: &[MultivariateSeries],
        timeout_ms: u64,
    ) -> Result<Vec<Vec<f64>>, BridgeError> {
        let id = self.next_id;
        self.next_id += 1;
        let msg = EngineMessage::Predict {
            id,
            samples: batch
                .iter()
                .map(|s| s.rows().map(<[f64]>::to_vec).collect())
                .collect(),
        };
        let mut line = serde_json::to_string(&msg).map_err(io::Error::other)?;
        line.push('\n');
        let stdin = self.stdin.as_mut().ok_or(BridgeError::Broken)?;
        if let Err(e) = stdin.write_all(line.as_bytes()).and_then(|_| stdin.flush()) {
            return Err(match e.kind() {
                io::ErrorKind::BrokenPipe => {
                    BridgeError::ChildExited(wait_briefly(&mut self.child))
                }
                _ => BridgeError::Io(e),
            });
        }
        let line = self
            .recv(Duration::from_millis(timeout_ms))?
            .ok_or(BridgeError::Timeout { id, ms: timeout_ms })?;
        match parse_line(&line)? {
            ChildMessage::Scores { id: got, scores } => {
                if got != id {
                    return Err(BridgeError::IdMismatch { expected: id, got });
                }
                Ok(scores)
            }
            ChildMessage::Error { id: got, message } => match got {
                Some(got) if got != id => Err(BridgeError::IdMismatch { expected: id, got }),
                _ => Err(BridgeError::Remote { id, message }),
            },
            ChildMessage::Hello { .. } => Err(BridgeError::Protocol {
                line,
                message: "unexpected hello".into(),
            }),
        }
    }
}

fn parse_line(line: &str) -> Result<ChildMessage, BridgeError> {
    serde_json::from_str(line.trim()).map_err(|e| BridgeError::Protocol {
        line: line.to_string(),
        message: e.to_string(),
    })
}

fn wait_briefly(child: &mut Child) -> String {
    let deadline = Instant::now() + Duration::from_millis(500);
    loop {
        match child.try_wait() {
            Ok(Some(status)) => return format!("with {status}"),
            Ok(None) if Instant::now() < deadline => thread::sleep(Duration::from_millis(5)),
            _ => return "(closed stdout)".into(),
        }
    }
}

/// FIFO admission so concurrent callers are served in arrival order.
#[derive(Default)]
struct TicketLock {
    state: Mutex<(u64, u64)>,
    turn: Condvar,
}

impl TicketLock {
    fn run<R>(&self, f: impl FnOnce() -> R) -> R {
        let mut st = self.state.lock().unwrap_or_else(|p| p.into_inner());
        let ticket = st.0;
        st.0 += 1;
        while st.1 != ticket {
            st = self.turn.wait(st).unwrap_or_else(|p| p.into_inner());
        }
        drop(st);
        let out = f();
        let mut st = self.state.lock().unwrap_or_else(|p| p.into_inner());
        st.1 += 1;
        drop(st);
        self.turn.notify_all();
        out
    }
}

struct BridgeScorer {
    conn: Mutex<Connection>,
    queue: TicketLock,
    class_count: usize,
    shape: Shape,
    startup_timeout_ms: u64,
    request_timeout_ms: u64,
}

impl Scorer for BridgeScorer {
    fn class_count(&self) -> usize {
        self.class_count
    }

    fn shape(&self) -> Shape {
        self.shape
    }

    fn score_batch(&self, batch: &[MultivariateSeries]) -> Result<Vec<Vec<f64>>, ScoreError> {
        self.queue.run(|| {
            let mut conn = self.conn.lock().unwrap_or_else(|p| p.into_inner());
            if conn.broken {
                return Err(BridgeError::Broken.into());
            }
            let out = conn.request(batch, self.request_timeout_ms);
            // a late or malformed reply would desynchronise later requests
            if matches!(
                out,
                Err(BridgeError::Timeout { .. }
                    | BridgeError::Protocol { .. }
                    | BridgeError::ChildExited(_)
                    | BridgeError::Io(_))
            ) {
                conn.broken = true;
            }
            Ok(out?)
        })
    }
}

impl Drop for BridgeScorer {
    fn drop(&mut self) {
        let conn = self.conn.get_mut().unwrap_or_else(|p| p.into_inner());
        shutdown(&mut conn.child, &mut conn.stdin, self.startup_timeout_ms);
    }
}

fn shutdown(child: &mut Child, stdin: &mut Option<ChildStdin>, grace_ms: u64) {
    drop(stdin.take());
    let deadline = Instant::now() + Duration::from_millis(grace_ms);
    while Instant::now() < deadline {
        match child.try_wait() {
            Ok(Some(_)) => return,
            Ok(None) => thread::sleep(Duration::from_millis(5)),
            Err(_) => break,
        }
    }
    let _ = child.kill();
    let _ = child.wait();
}

/// Spawn the model process, check its declared shape and return an argmax
/// handle scoring through it.
pub fn bridge_open(
    cfg: &BridgeConfig,
    shape: Shape,
    class_count: usize,
) -> Result<ClassifierHandle, BridgeError> {
    cfg.validate()?;
    let mut child = Command::new(&cfg.command[0])
        .args(&cfg.command[1..])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .map_err(|source| BridgeError::Spawn {
            command: cfg.command.join(" "),
            source,
        })?;
    let stdout = child.stdout.take().expect("piped stdout");
    let mut stdin = child.stdin.take();
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for line in BufReader::new(stdout).lines() {
            let msg = match line {
                Ok(l) => Line::Text(l),
                Err(e) => Line::Failed(e),
            };
            if tx.send(msg).is_err() {
                break;
            }
        }
    });
    let mut conn = Connection {
        child,
        stdin: stdin.take(),
        lines: rx,
        next_id: 0,
        broken: false,
    };
    match handshake(&mut conn, cfg.startup_timeout_ms, shape, class_count) {
        Ok(()) => {}
        Err(e) => {
            shutdown(&mut conn.child, &mut conn.stdin, cfg.startup_timeout_ms);
            return Err(e);
        }
    }
    let scorer = BridgeScorer {
        conn: Mutex::new(conn),
        queue: TicketLock::default(),
        class_count,
        shape,
        startup_timeout_ms: cfg.startup_timeout_ms,
        request_timeout_ms: cfg.request_timeout_ms,
    };
    ClassifierHandle::new(Arc::new(scorer), PredictionRule::Argmax)
        .map_err(|e| BridgeError::Config(e.to_string()))
}

fn handshake(
    conn: &mut Connection,
    timeout_ms: u64,
    shape: Shape,
    class_count: usize,
) -> Result<(), BridgeError> {
    let line = conn
        .recv(Duration::from_millis(timeout_ms))?
        .ok_or(BridgeError::HandshakeTimeout(timeout_ms))?;
    match parse_line(&line)? {
        ChildMessage::Hello {
            class_count: c,
            variables,
            timesteps,
        } => {
            for (field, declared, expected) in [
                ("class_count", c, class_count),
                ("variables", variables, shape.variables),
                ("timesteps", timesteps, shape.timesteps),
            ] {
                if declared != expected {
                    return Err(BridgeError::DeclarationMismatch {
                        field,
                        declared,
                        expected,
                    });
                }
            }
            Ok(())
        }
        _ => Err(BridgeError::Protocol {
            line,
            message: "expected hello".into(),
        }),
    }
}

/// Child side of the protocol: serve `handle` until `input` closes.
///
/// Malformed requests and scoring failures are answered with an `error`
/// line and the loop continues.
pub fn serve(
    handle: &ClassifierHandle,
    input: impl BufRead,
    mut output: impl Write,
) -> io::Result<()> {
    let shape = handle.shape();
    let hello = ChildMessage::Hello {
        class_count: handle.class_count(),
        variables: shape.variables,
        timesteps: shape.timesteps,
    };
    writeln!(output, "{}", serde_json::to_string(&hello)?)?;
    output.flush()?;
    let names: Vec<String> = (0..shape.variables).map(|i| format!("v{i}")).collect();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<EngineMessage>(&line) {
            Err(e) => ChildMessage::Error {
                id: serde_json::from_str::<serde_json::Value>(&line)
                    .ok()
                    .and_then(|v| v.get("id").and_then(|i| i.as_u64())),
                message: format!("malformed request: {e}"),
            },
            Ok(EngineMessage::Predict { id, samples }) => {
                let scored = samples
                    .into_iter()
                    .map(|rows| {
                        MultivariateSeries::new(names.clone(), rows).map_err(|e| e.to_string())
                    })
                    .collect::<Result<Vec<_>, _>>()
                    .and_then(|batch| handle.predict_scores(&batch).map_err(|e| e.to_string()));
                match scored {
                    Ok(scores) => ChildMessage::Scores {
                        id,
                        scores: scores.into_iter().map(|s| s.as_slice().to_vec()).collect(),
                    },
                    Err(message) => ChildMessage::Error {
                        id: Some(id),
                        message,
                    },
                }
            }
        };
        writeln!(output, "{}", serde_json::to_string(&reply)?)?;
        output.flush()?;
    }
    Ok(())
}
