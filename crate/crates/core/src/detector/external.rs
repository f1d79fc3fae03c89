//! Out-of-process detector speaking newline-delimited JSON.
//!
//! The backend announces itself with [`HANDSHAKE`] and then answers each
//! request line `{"frames":[{"id":..,"path":..}]}` with exactly one line
//! `{"detections":[[{"x":..,"y":..,"w":..,"h":..,"conf":..}], ...]}`.
//! Frames are handed over by path; images are spooled as PNG first.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{Detection, Detector, DetectorError};
use crate::geometry::BoundingBox;
use crate::ingest::Frame;

pub const HANDSHAKE: &str = r#"{"protocol":"reefpipe-detect","version":1}"#;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    /// Program and arguments; stdin/stdout carry the protocol.
    Command(Vec<String>),
    /// `host:port` of a listening backend.
    Tcp(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalConfig {
    pub endpoint: Endpoint,
    pub deadline: Duration,
    pub handshake_timeout: Duration,
    pub spool_dir: PathBuf,
}

#[derive(Deserialize)]
struct Hello {
    protocol: String,
    version: u32,
}

#[derive(Serialize)]
struct FrameRef<'a> {
    id: u64,
    path: &'a str,
}

#[derive(Serialize)]
struct Request<'a> {
    frames: Vec<FrameRef<'a>>,
}

#[derive(Deserialize)]
struct WireBox {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    conf: f64,
}

#[derive(Deserialize)]
struct Response {
    detections: Vec<Vec<WireBox>>,
}

pub struct ExternalDetector {
    writer: Box<dyn Write + Send>,
    lines: Receiver<std::io::Result<String>>,
    child: Option<Child>,
    /// Responses still owed for requests that already timed out.
    stale: usize,
    deadline: Duration,
    spool_dir: PathBuf,
}

fn unavailable(frame_ids: Vec<u64>, message: impl Into<String>) -> DetectorError {
    DetectorError::Unavailable {
        frame_ids,
        message: message.into(),
    }
}

fn spawn_line_reader(reader: impl Read + Send + 'static) -> Receiver<std::io::Result<String>> {
    let (tx, rx) = mpsc::channel();
    thread::Builder::new()
        .name("detector-reader".into())
        .spawn(move || {
            for line in BufReader::new(reader).lines() {
                let stop = line.is_err();
                if tx.send(line).is_err() || stop {
                    break;
                }
            }
        })
        .expect("spawn reader thread");
    rx
}

impl ExternalDetector {
    /// Start or connect to the backend and wait for its handshake line.
    pub fn connect(cfg: &ExternalConfig) -> Result<Self, DetectorError> {
        std::fs::create_dir_all(&cfg.spool_dir)
            .map_err(|e| unavailable(vec![], format!("spool dir {}: {e}", cfg.spool_dir.display())))?;
        let (writer, lines, child): (Box<dyn Write + Send>, _, _) = match &cfg.endpoint {
            Endpoint::Command(argv) => {
                let (prog, args) = argv.split_first().ok_or_else(|| unavailable(vec![], "empty command"))?;
                let mut child = Command::new(prog)
                    .args(args)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()
                    .map_err(|e| unavailable(vec![], format!("spawn {prog}: {e}")))?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                (Box::new(stdin), spawn_line_reader(stdout), Some(child))
            }
            Endpoint::Tcp(addr) => {
                let stream = TcpStream::connect(addr).map_err(|e| unavailable(vec![], format!("connect {addr}: {e}")))?;
                stream.set_nodelay(true).ok();
                let read_half = stream
                    .try_clone()
                    .map_err(|e| unavailable(vec![], format!("clone socket: {e}")))?;
                (Box::new(stream), spawn_line_reader(read_half), None)
            }
        };
        let det = Self {
            writer,
            lines,
            child,
            stale: 0,
            deadline: cfg.deadline,
            spool_dir: cfg.spool_dir.clone(),
        };
        let hello = det
            .recv_line(Instant::now() + cfg.handshake_timeout)
            .map_err(|e| match e {
                RecvError::Timeout => unavailable(vec![], "no handshake from backend"),
                RecvError::Closed(m) => unavailable(vec![], m),
            })?;
        match serde_json::from_str::<Hello>(&hello) {
            Ok(h) if h.protocol == "reefpipe-detect" && h.version == 1 => Ok(det),
            _ => Err(unavailable(vec![], format!("unexpected handshake {hello:?}"))),
        }
    }

    fn recv_line(&self, until: Instant) -> Result<String, RecvError> {
        let wait = until.saturating_duration_since(Instant::now());
        match self.lines.recv_timeout(wait) {
            Ok(Ok(line)) => Ok(line),
            Ok(Err(e)) => Err(RecvError::Closed(format!("read failed: {e}"))),
            Err(RecvTimeoutError::Timeout) => Err(RecvError::Timeout),
            Err(RecvTimeoutError::Disconnected) => Err(RecvError::Closed("backend closed its output".into())),
        }
    }

    fn spool(&self, frame: &Frame) -> Result<String, String> {
        let path = self.spool_dir.join(format!("frame_{:06}.png", frame.frame_id));
        frame.to_rgb_image().save(&path).map_err(|e| e.to_string())?;
        Ok(path.display().to_string())
    }
}

enum RecvError {
    Timeout,
    Closed(String),
}

fn parse_response(line: &str, frames: &[Frame]) -> Result<Vec<Vec<Detection>>, String> {
    let resp: Response = serde_json::from_str(line).map_err(|e| format!("malformed response: {e}"))?;
    if resp.detections.len() != frames.len() {
        return Err(format!(
            "response has {} detection lists for a batch of {}",
            resp.detections.len(),
            frames.len()
        ));
    }
    resp.detections
        .into_iter()
        .zip(frames)
        .map(|(list, f)| {
            list.into_iter()
                .map(|b| {
                    let bbox = BoundingBox::new(b.x, b.y, b.w, b.h);
                    if !bbox.is_valid() || !(0.0..=1.0).contains(&b.conf) {
                        return Err(format!("invalid detection on frame {}", f.frame_id));
                    }
                    Ok(Detection::new(f.frame_id, bbox, b.conf))
                })
                .collect()
        })
        .collect()
}

impl Detector for ExternalDetector {
    fn detect_batch(&mut self, frames: &[Frame]) -> Result<Vec<Vec<Detection>>, DetectorError> {
        if frames.is_empty() {
            return Err(DetectorError::EmptyBatch);
        }
        let ids: Vec<u64> = frames.iter().map(|f| f.frame_id).collect();
        let paths = frames
            .iter()
            .map(|f| self.spool(f))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|m| unavailable(ids.clone(), format!("spool: {m}")))?;
        let request = Request {
            frames: frames
                .iter()
                .zip(&paths)
                .map(|(f, p)| FrameRef { id: f.frame_id, path: p })
                .collect(),
        };
        let mut line = serde_json::to_string(&request).expect("request serializes");
        line.push('\n');
        self.writer
            .write_all(line.as_bytes())
            .and_then(|_| self.writer.flush())
            .map_err(|e| unavailable(ids.clone(), format!("write request: {e}")))?;

        let until = Instant::now() + self.deadline;
        let timeout = |ids: Vec<u64>, deadline| DetectorError::Timeout { frame_ids: ids, deadline };
        while self.stale > 0 {
            match self.recv_line(until) {
                Ok(_) => self.stale -= 1,
                Err(RecvError::Timeout) => {
                    self.stale += 1;
                    return Err(timeout(ids, self.deadline));
                }
                Err(RecvError::Closed(m)) => return Err(unavailable(ids, m)),
            }
        }
        match self.recv_line(until) {
            Ok(resp) => parse_response(&resp, frames).map_err(|message| DetectorError::Protocol {
                frame_ids: ids,
                message,
            }),
            Err(RecvError::Timeout) => {
                self.stale += 1;
                Err(timeout(ids, self.deadline))
            }
            Err(RecvError::Closed(m)) => Err(unavailable(ids, m)),
        }
    }
}

impl Drop for ExternalDetector {
    fn drop(&mut self) {
        if let Some(child) = &mut self.child {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}
