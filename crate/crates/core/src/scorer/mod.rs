//! Client side of the scorer protocol: obtains class probabilities for
//! images from an external, deterministic model process.

pub mod protocol;
pub mod server;

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::fmt;
use std::io::{self, BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::str::FromStr;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use image::RgbImage;
use rayon::prelude::*;
use thiserror::Error;

use crate::bundle::PROBABILITY_SUM_TOLERANCE;
use protocol::{encode_image, Message, PROTOCOL_VERSION};

pub const DEFAULT_HELLO_TIMEOUT: Duration = Duration::from_secs(30);
pub const DEFAULT_REQUEST_TIMEOUT: Duration = Duration::from_secs(60);
pub const DEFAULT_MAX_INFLIGHT: usize = 4;

#[derive(Debug, Error)]
pub enum ScorerError {
    #[error("failed to spawn scorer {command:?}: {source}")]
    Spawn {
        command: String,
        #[source]
        source: io::Error,
    },

    #[error("failed to connect to scorer at {addr}: {source}")]
    Connect {
        addr: String,
        #[source]
        source: io::Error,
    },

    #[error("scorer sent no hello within {0:?}")]
    HelloTimeout(Duration),

    #[error("scorer handshake failed: {0}")]
    Handshake(String),

    #[error("label-set mismatch: scorer declares {actual} classes {actual_preview:?}, bundle has {expected} {expected_preview:?}")]
    LabelMismatch {
        expected: usize,
        actual: usize,
        expected_preview: Vec<String>,
        actual_preview: Vec<String>,
    },

    #[error("scorer closed the connection")]
    Closed,

    #[error("scorer I/O: {0}")]
    Io(#[from] io::Error),

    #[error("no response to request {id} within {after:?}")]
    Timeout { id: u64, after: Duration },

    #[error("malformed response{}: {message}", id.map(|i| format!(" to request {i}")).unwrap_or_default())]
    Malformed { id: Option<u64>, message: String },

    #[error("response to request {id}: probability sum {sum}")]
    ProbabilitySum { id: u64, sum: f64 },

    #[error("scorer error{}: {message}", id.map(|i| format!(" for request {i}")).unwrap_or_default())]
    Remote { id: Option<u64>, message: String },

    #[error("protocol violation: {0}")]
    Protocol(String),
}

/// Where the scorer lives: a command to spawn (speaking over its standard
/// input/output) or a TCP address written `tcp://host:port`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Command(Vec<String>),
    Tcp(String),
}

impl FromStr for Endpoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if let Some(addr) = s.strip_prefix("tcp://") {
            if addr.is_empty() {
                return Err("empty TCP address".into());
            }
            return Ok(Endpoint::Tcp(addr.to_string()));
        }
        let words = shell_words::split(s).map_err(|e| format!("cannot parse scorer command: {e}"))?;
        if words.is_empty() {
            return Err("empty scorer command".into());
        }
        Ok(Endpoint::Command(words))
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Command(words) => f.write_str(&shell_words::join(words)),
            Endpoint::Tcp(addr) => write!(f, "tcp://{addr}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionOptions {
    pub hello_timeout: Duration,
    pub request_timeout: Duration,
    pub max_inflight: usize,
}

impl Default for SessionOptions {
    fn default() -> Self {
        SessionOptions {
            hello_timeout: DEFAULT_HELLO_TIMEOUT,
            request_timeout: DEFAULT_REQUEST_TIMEOUT,
            max_inflight: DEFAULT_MAX_INFLIGHT,
        }
    }
}

/// Anything that turns images into class-probability vectors.
pub trait Scorer {
    /// Class labels in model order.
    fn classes(&self) -> &[String];

    /// Probabilities for each image, in input order.
    fn score_batch(&mut self, images: &[RgbImage]) -> Result<Vec<Vec<f64>>, ScorerError>;

    fn score(&mut self, image: &RgbImage) -> Result<Vec<f64>, ScorerError> {
        Ok(self.score_batch(std::slice::from_ref(image))?.remove(0))
    }
}

/// Checks that a scorer's labels equal `expected`, in order.
pub fn check_classes(actual: &[String], expected: &[String]) -> Result<(), ScorerError> {
    if actual == expected {
        return Ok(());
    }
    let preview = |v: &[String]| v.iter().take(5).cloned().collect();
    Err(ScorerError::LabelMismatch {
        expected: expected.len(),
        actual: actual.len(),
        expected_preview: preview(expected),
        actual_preview: preview(actual),
    })
}

/// A live protocol session. Requests are pipelined up to `max_inflight`
/// and responses are matched by id in whatever order they arrive.
pub struct ScorerSession {
    classes: Vec<String>,
    writer: Box<dyn Write + Send>,
    lines: Receiver<io::Result<String>>,
    next_id: u64,
    /// Ids whose requests were given up on; late answers are discarded.
    abandoned: HashSet<u64>,
    options: SessionOptions,
    child: Option<Child>,
    socket: Option<TcpStream>,
}

impl fmt::Debug for ScorerSession {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScorerSession")
            .field("classes", &self.classes.len())
            .field("next_id", &self.next_id)
            .field("options", &self.options)
            .finish()
    }
}

fn spawn_line_reader<R: io::Read + Send + 'static>(reader: R) -> Receiver<io::Result<String>> {
    let (tx, rx) = mpsc::channel();
    thread::Builder::new()
        .name("scorer-reader".into())
        .spawn(move || {
            let mut reader = BufReader::new(reader);
            loop {
                let mut line = String::new();
                match reader.read_line(&mut line) {
                    Ok(0) => break,
                    Ok(_) => {
                        if tx.send(Ok(line)).is_err() {
                            break;
                        }
                    }
                    Err(e) => {
                        let _ = tx.send(Err(e));
                        break;
                    }
                }
            }
        })
        .expect("spawning the scorer reader thread");
    rx
}

impl ScorerSession {
    /// Opens a session and waits for the scorer's hello.
    pub fn connect(endpoint: &Endpoint, options: SessionOptions) -> Result<Self, ScorerError> {
        if options.max_inflight == 0 {
            return Err(ScorerError::Protocol("max_inflight must be at least 1".into()));
        }
        let (writer, lines, child, socket): (Box<dyn Write + Send>, _, _, _) = match endpoint {
            Endpoint::Command(words) => {
                let mut child = Command::new(&words[0])
                    .args(&words[1..])
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()
                    .map_err(|source| ScorerError::Spawn {
                        command: endpoint.to_string(),
                        source,
                    })?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                (Box::new(stdin), spawn_line_reader(stdout), Some(child), None)
            }
            Endpoint::Tcp(addr) => {
                let connect_err = |source| ScorerError::Connect {
                    addr: addr.clone(),
                    source,
                };
                let resolved = addr
                    .to_socket_addrs()
                    .map_err(connect_err)?
                    .next()
                    .ok_or_else(|| connect_err(io::Error::new(io::ErrorKind::NotFound, "address did not resolve")))?;
                let stream = TcpStream::connect_timeout(&resolved, options.hello_timeout).map_err(connect_err)?;
                stream.set_nodelay(true).ok();
                let read_half = stream.try_clone()?;
                let control = stream.try_clone()?;
                (Box::new(stream), spawn_line_reader(read_half), None, Some(control))
            }
        };

        let mut session = ScorerSession {
            classes: Vec::new(),
            writer,
            lines,
            next_id: 1,
            abandoned: HashSet::new(),
            options,
            child,
            socket,
        };
        session.classes = session.read_hello()?;
        Ok(session)
    }

    fn read_hello(&mut self) -> Result<Vec<String>, ScorerError> {
        let line = match self.lines.recv_timeout(self.options.hello_timeout) {
            Ok(line) => line?,
            Err(RecvTimeoutError::Timeout) => return Err(ScorerError::HelloTimeout(self.options.hello_timeout)),
            Err(RecvTimeoutError::Disconnected) => return Err(ScorerError::Closed),
        };
        match serde_json::from_str::<Message>(line.trim_end()) {
            Ok(Message::Hello { version, classes }) if version == PROTOCOL_VERSION => {
                if classes.is_empty() {
                    return Err(ScorerError::Handshake("hello declares no classes".into()));
                }
                Ok(classes)
            }
            Ok(Message::Hello { version, .. }) => Err(ScorerError::Handshake(format!(
                "unsupported protocol version {version}"
            ))),
            Ok(other) => Err(ScorerError::Handshake(format!("expected hello, got {other:?}"))),
            Err(e) => Err(ScorerError::Handshake(format!("unparseable first line: {e}"))),
        }
    }

    pub fn options(&self) -> &SessionOptions {
        &self.options
    }

    fn send(&mut self, id: u64, image: &str) -> Result<(), ScorerError> {
        let line = Message::Score {
            id,
            image: image.to_string(),
        }
        .to_line();
        self.writer.write_all(line.as_bytes())?;
        self.writer.flush()?;
        Ok(())
    }

    fn validate_probs(&self, id: u64, probs: &[f64]) -> Result<(), ScorerError> {
        if probs.len() != self.classes.len() {
            return Err(ScorerError::Malformed {
                id: Some(id),
                message: format!("{} probabilities for {} classes", probs.len(), self.classes.len()),
            });
        }
        if let Some(bad) = probs.iter().find(|p| !p.is_finite() || **p < 0.0 || **p > 1.0) {
            return Err(ScorerError::Malformed {
                id: Some(id),
                message: format!("probability {bad} outside [0, 1]"),
            });
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROBABILITY_SUM_TOLERANCE {
            return Err(ScorerError::ProbabilitySum { id, sum });
        }
        Ok(())
    }

    fn pipeline(
        &mut self,
        encoded: &[String],
        outstanding: &mut BTreeMap<u64, usize>,
    ) -> Result<Vec<Vec<f64>>, ScorerError> {
        let n = encoded.len();
        let mut results: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut retried = vec![false; n];
        let mut queue: VecDeque<usize> = (0..n).collect();
        let mut done = 0;

        while done < n {
            while outstanding.len() < self.options.max_inflight {
                let Some(i) = queue.pop_front() else { break };
                let id = self.next_id;
                self.next_id += 1;
                outstanding.insert(id, i);
                self.send(id, &encoded[i])?;
            }

            let line = match self.lines.recv_timeout(self.options.request_timeout) {
                Ok(line) => line?,
                Err(RecvTimeoutError::Timeout) => {
                    let id = *outstanding.keys().next().expect("waiting implies outstanding requests");
                    return Err(ScorerError::Timeout {
                        id,
                        after: self.options.request_timeout,
                    });
                }
                Err(RecvTimeoutError::Disconnected) => return Err(ScorerError::Closed),
            };

            let (id, outcome) = match serde_json::from_str::<Message>(line.trim_end()) {
                Ok(Message::Probs { id, probs }) => {
                    if self.abandoned.remove(&id) {
                        continue;
                    }
                    if !outstanding.contains_key(&id) {
                        return Err(ScorerError::Protocol(format!("response for unknown request id {id}")));
                    }
                    let check = self.validate_probs(id, &probs);
                    (id, check.map(|_| probs))
                }
                Ok(Message::Error { id: Some(id), .. }) if self.abandoned.remove(&id) => continue,
                Ok(Message::Error { id, message }) => return Err(ScorerError::Remote { id, message }),
                Ok(other) => return Err(ScorerError::Protocol(format!("unexpected message {other:?}"))),
                Err(e) => {
                    let id = *outstanding.keys().next().expect("waiting implies outstanding requests");
                    (
                        id,
                        Err(ScorerError::Malformed {
                            id: Some(id),
                            message: e.to_string(),
                        }),
                    )
                }
            };

            let i = outstanding.remove(&id).expect("id checked above");
            match outcome {
                Ok(probs) => {
                    results[i] = Some(probs);
                    done += 1;
                }
                Err(err) if !retried[i] => {
                    log::warn!("retrying request {id}: {err}");
                    retried[i] = true;
                    // a late answer to the failed id must not be taken for the retry's
                    self.abandoned.insert(id);
                    queue.push_front(i);
                }
                Err(err) => return Err(err),
            }
        }
        Ok(results.into_iter().map(|r| r.expect("all results filled")).collect())
    }
}

impl Scorer for ScorerSession {
    fn classes(&self) -> &[String] {
        &self.classes
    }

    fn score_batch(&mut self, images: &[RgbImage]) -> Result<Vec<Vec<f64>>, ScorerError> {
        let encoded: Vec<String> = images.par_iter().map(encode_image).collect();
        let mut outstanding = BTreeMap::new();
        let result = self.pipeline(&encoded, &mut outstanding);
        self.abandoned.extend(outstanding.keys().copied());
        result
    }
}

impl Drop for ScorerSession {
    fn drop(&mut self) {
        let _ = self.writer.flush();
        // replacing the writer closes the scorer's stdin or our socket half
        self.writer = Box::new(io::sink());
        if let Some(socket) = self.socket.take() {
            let _ = socket.shutdown(std::net::Shutdown::Both);
        }
        if let Some(mut child) = self.child.take() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}
