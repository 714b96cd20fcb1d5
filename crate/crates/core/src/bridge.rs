//! Client side of the external-matcher protocol.
//!
//! A bridge is a long-lived child process speaking UTF-8 JSON lines on
//! stdin/stdout: one request per line, one response per line, in order.
//! Images travel by path as PNG files in a private temporary directory.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::time::{Duration, Instant};

use nalgebra::Point2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{BuiltinMatcher, Correspondence, CorrespondenceSet, MatchError, Matcher, MatcherConfig, BUILTIN};
use crate::raster::Image;

/// Directory searched for bridge executables named by matcher id.
pub const BRIDGE_PATH_ENV: &str = "EARTHMATCH_BRIDGE_PATH";
/// Per-request latency budget.
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BridgeRequest {
    pub request_id: u64,
    pub query_image_path: String,
    pub candidate_image_path: String,
    pub image_side: u32,
    pub max_keypoints: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeResponse {
    #[serde(default)]
    pub request_id: Option<serde_json::Value>,
    #[serde(default)]
    pub correspondences: Option<Vec<[f64; 5]>>,
    #[serde(default)]
    pub error: Option<String>,
}

/// A protocol violation or transport failure, named for reports.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Violation {
    #[error("no response within {0:?}")]
    Timeout(Duration),
    #[error("bridge process exited")]
    Exited,
    #[error("malformed response line: {0}")]
    Malformed(String),
    #[error("request_id missing from response (expected {expected})")]
    MissingRequestId { expected: u64 },
    #[error("request_id mismatch: expected {expected}, got {got}")]
    RequestIdMismatch { expected: u64, got: String },
    #[error("response must carry exactly one of correspondences / error")]
    Ambiguous,
    #[error("correspondence {index} outside the {side}px canonical frame: {values:?}")]
    OutOfBounds { index: usize, side: u32, values: [f64; 5] },
    #[error("correspondence {index} has a non-finite value")]
    NonFinite { index: usize },
    #[error("backend error: {0}")]
    Backend(String),
    #[error("i/o: {0}")]
    Io(String),
}

/// Checks a decoded response against the request it answers.
pub fn validate_response(resp: &BridgeResponse, req: &BridgeRequest) -> Result<Vec<Correspondence>, Violation> {
    match &resp.request_id {
        None | Some(serde_json::Value::Null) => {
            return Err(Violation::MissingRequestId {
                expected: req.request_id,
            })
        }
        Some(v) if v.as_u64() != Some(req.request_id) => {
            return Err(Violation::RequestIdMismatch {
                expected: req.request_id,
                got: v.to_string(),
            })
        }
        Some(_) => {}
    }
    let pairs = match (&resp.correspondences, &resp.error) {
        (Some(c), None) => c,
        (None, Some(e)) => return Err(Violation::Backend(e.clone())),
        _ => return Err(Violation::Ambiguous),
    };
    let side = req.image_side as f64;
    pairs
        .iter()
        .enumerate()
        .map(|(index, v)| {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Violation::NonFinite { index });
            }
            if v[..4].iter().any(|&x| !(0.0..=side).contains(&x)) {
                return Err(Violation::OutOfBounds {
                    index,
                    side: req.image_side,
                    values: *v,
                });
            }
            Ok(Correspondence {
                query: Point2::new(v[0], v[1]),
                candidate: Point2::new(v[2], v[3]),
                score: v[4],
            })
        })
        .collect()
}

/// Running bridge process with a line reader on a helper thread, so reads
/// can time out.
pub struct BridgeProcess {
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<std::io::Result<String>>,
    timeout: Duration,
}

impl BridgeProcess {
    pub fn spawn(executable: &Path, timeout: Duration) -> std::io::Result<Self> {
        let mut child = Command::new(executable)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take();
        let stdout = child.stdout.take().expect("stdout piped");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(BridgeProcess {
            child,
            stdin,
            lines: rx,
            timeout,
        })
    }

    /// Writes one raw line and waits for one response line.
    pub fn round_trip(&mut self, line: &str) -> Result<String, Violation> {
        let stdin = self.stdin.as_mut().ok_or(Violation::Exited)?;
        writeln!(stdin, "{line}")
            .and_then(|_| stdin.flush())
            .map_err(|_| Violation::Exited)?;
        match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(l)) => Ok(l),
            Ok(Err(e)) => Err(Violation::Io(e.to_string())),
            Err(RecvTimeoutError::Timeout) => Err(Violation::Timeout(self.timeout)),
            Err(RecvTimeoutError::Disconnected) => Err(Violation::Exited),
        }
    }

    pub fn request(&mut self, req: &BridgeRequest) -> Result<Vec<Correspondence>, Violation> {
        let line = serde_json::to_string(req).expect("request serializes");
        let reply = self.round_trip(&line)?;
        let resp: BridgeResponse =
            serde_json::from_str(&reply).map_err(|e| Violation::Malformed(format!("{e}: {reply}")))?;
        validate_response(&resp, req)
    }

    pub fn is_alive(&mut self) -> bool {
        matches!(self.child.try_wait(), Ok(None))
    }

    /// Closes stdin and waits for the process to exit.
    pub fn shutdown(&mut self) -> std::io::Result<std::process::ExitStatus> {
        self.stdin.take();
        self.child.wait()
    }
}

impl Drop for BridgeProcess {
    fn drop(&mut self) {
        self.stdin.take();
        let deadline = Instant::now() + Duration::from_secs(2);
        while Instant::now() < deadline {
            if !matches!(self.child.try_wait(), Ok(None)) {
                return;
            }
            std::thread::sleep(Duration::from_millis(10));
        }
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// A [`Matcher`] backed by a bridge process.
pub struct BridgeMatcher {
    id: String,
    proc: BridgeProcess,
    dir: tempfile::TempDir,
    next_id: u64,
    query_cache: Option<(Image, PathBuf)>,
}

impl BridgeMatcher {
    pub fn spawn(id: &str, executable: &Path) -> Result<Self, MatchError> {
        Self::spawn_with_timeout(id, executable, DEFAULT_TIMEOUT)
    }

    pub fn spawn_with_timeout(id: &str, executable: &Path, timeout: Duration) -> Result<Self, MatchError> {
        let err = |message: String| MatchError::Backend {
            backend: id.to_string(),
            message,
        };
        let proc = BridgeProcess::spawn(executable, timeout)
            .map_err(|e| err(format!("cannot start {}: {e}", executable.display())))?;
        let dir = tempfile::tempdir().map_err(|e| err(format!("temporary directory: {e}")))?;
        Ok(BridgeMatcher {
            id: id.to_string(),
            proc,
            dir,
            next_id: 0,
            query_cache: None,
        })
    }

    fn write(&self, img: &Image, name: &str) -> Result<PathBuf, MatchError> {
        let path = self.dir.path().join(name);
        img.save(&path).map_err(|e| MatchError::Backend {
            backend: self.id.clone(),
            message: e.to_string(),
        })?;
        Ok(path)
    }
}

impl Matcher for BridgeMatcher {
    fn id(&self) -> &str {
        &self.id
    }

    fn match_canonical(
        &mut self,
        query: &Image,
        candidate: &Image,
        cfg: &MatcherConfig,
    ) -> Result<CorrespondenceSet, MatchError> {
        let cached = matches!(&self.query_cache, Some((img, _)) if img == query);
        if !cached {
            let name = format!("query-{}.png", self.next_id);
            let path = self.write(query, &name)?;
            self.query_cache = Some((query.clone(), path));
        }
        let qpath = self.query_cache.as_ref().expect("cache filled above").1.clone();
        let cpath = self.write(candidate, "candidate.png")?;
        let req = BridgeRequest {
            request_id: self.next_id,
            query_image_path: qpath.display().to_string(),
            candidate_image_path: cpath.display().to_string(),
            image_side: cfg.image_side,
            max_keypoints: cfg.max_keypoints,
        };
        self.next_id += 1;
        let pairs = self.proc.request(&req).map_err(|v| MatchError::Backend {
            backend: self.id.clone(),
            message: v.to_string(),
        })?;
        Ok(CorrespondenceSet {
            pairs,
            source: self.id.clone(),
        })
    }
}

/// Locates the executable for a matcher id: an explicit path, or a file
/// named `id` in `$EARTHMATCH_BRIDGE_PATH`.
pub fn resolve_bridge(id: &str) -> Option<PathBuf> {
    let direct = Path::new(id);
    if id.contains(std::path::MAIN_SEPARATOR) && direct.is_file() {
        return Some(direct.to_path_buf());
    }
    let dir = std::env::var_os(BRIDGE_PATH_ENV)?;
    let p = Path::new(&dir).join(id);
    p.is_file().then_some(p)
}

/// Instantiates the matcher registered under `id`.
pub fn create_matcher(id: &str) -> Result<Box<dyn Matcher + Send>, MatchError> {
    if id == BUILTIN {
        return Ok(Box::new(BuiltinMatcher::new()));
    }
    match resolve_bridge(id) {
        Some(exe) => Ok(Box::new(BridgeMatcher::spawn(id, &exe)?)),
        None => Err(MatchError::UnknownBackend(id.to_string())),
    }
}

/// Outcome of one conformance case.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseResult {
    pub name: String,
    pub passed: bool,
    pub latency_s: f64,
    pub correspondences: usize,
    pub violation: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConformanceReport {
    pub executable: String,
    pub cases: Vec<CaseResult>,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }
}

/// Runs the protocol against identity, rotated and unrelated image pairs,
/// then checks that a malformed line yields an error response and leaves the
/// process alive.
pub fn conformance_check(executable: &Path) -> Result<ConformanceReport, Violation> {
    use crate::synth::{make_negative, make_pair, make_pair_with, PairParams, SynthSpec};

    let side = 128;
    let spec = SynthSpec::identity(side, 1);
    let io = |e: &dyn std::fmt::Display| Violation::Io(e.to_string());
    let identity = make_pair(&spec).map_err(|e| io(&e))?;
    let rot = PairParams {
        rotation_deg: 30.0,
        ..PairParams::identity()
    };
    let rotated = make_pair_with(&spec, &rot).map_err(|e| io(&e))?;
    let negative = make_negative(&SynthSpec::default().with_seed(1), 1).map_err(|e| io(&e))?;
    let dir = tempfile::tempdir().map_err(|e| io(&e))?;

    let mut proc = BridgeProcess::spawn(executable, DEFAULT_TIMEOUT).map_err(|e| io(&e))?;
    let mut cases = Vec::new();
    let fixtures = [
        ("identity", &identity.query.image, &identity.candidate.image),
        ("rotated", &rotated.query.image, &rotated.candidate.image),
        ("negative", &negative.query.image, &negative.candidate.image),
    ];
    for (i, (name, q, c)) in fixtures.into_iter().enumerate() {
        let qp = dir.path().join(format!("{name}-q.png"));
        let cp = dir.path().join(format!("{name}-c.png"));
        crate::raster::resize_square(q, side).save(&qp).map_err(|e| io(&e))?;
        crate::raster::resize_square(c, side).save(&cp).map_err(|e| io(&e))?;
        let req = BridgeRequest {
            request_id: i as u64 + 1,
            query_image_path: qp.display().to_string(),
            candidate_image_path: cp.display().to_string(),
            image_side: side,
            max_keypoints: 1024,
        };
        let t0 = Instant::now();
        let r = proc.request(&req);
        let latency_s = t0.elapsed().as_secs_f64();
        cases.push(CaseResult {
            name: name.to_string(),
            passed: r.is_ok(),
            latency_s,
            correspondences: r.as_ref().map_or(0, |v| v.len()),
            violation: r.err().map(|v| v.to_string()),
        });
    }

    let t0 = Instant::now();
    let malformed = proc.round_trip("{not json").and_then(|line| {
        let resp: BridgeResponse =
            serde_json::from_str(&line).map_err(|e| Violation::Malformed(format!("{e}: {line}")))?;
        let null_id = matches!(resp.request_id, None | Some(serde_json::Value::Null));
        if resp.error.is_none() || resp.correspondences.is_some() || !null_id {
            return Err(Violation::Malformed(format!(
                "expected an error response with null request_id, got {line}"
            )));
        }
        std::thread::sleep(Duration::from_millis(20));
        if !proc.is_alive() {
            return Err(Violation::Exited);
        }
        Ok(())
    });
    cases.push(CaseResult {
        name: "malformed-line".into(),
        passed: malformed.is_ok(),
        latency_s: t0.elapsed().as_secs_f64(),
        correspondences: 0,
        violation: malformed.err().map(|v| v.to_string()),
    });
    let _ = proc.shutdown();
    Ok(ConformanceReport {
        executable: executable.display().to_string(),
        cases,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(id: u64) -> BridgeRequest {
        BridgeRequest {
            request_id: id,
            query_image_path: "q.png".into(),
            candidate_image_path: "c.png".into(),
            image_side: 64,
            max_keypoints: 1024,
        }
    }

    fn parse(s: &str) -> BridgeResponse {
        serde_json::from_str(s).unwrap()
    }

    #[test]
    fn valid_response_decodes() {
        let r = parse(r#"{"request_id": 3, "correspondences": [[1, 2, 3, 4, 0.5], [64, 0, 0, 64, 1]]}"#);
        let c = validate_response(&r, &req(3)).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].query, Point2::new(1.0, 2.0));
        assert_eq!(c[0].candidate, Point2::new(3.0, 4.0));
        assert_eq!(c[1].score, 1.0);
    }

    #[test]
    fn violations_are_named() {
        let cases = [
            (r#"{"correspondences": []}"#, "missing"),
            (r#"{"request_id": null, "correspondences": []}"#, "missing"),
            (r#"{"request_id": 4, "correspondences": []}"#, "mismatch"),
            (r#"{"request_id": 3}"#, "exactly one"),
            (
                r#"{"request_id": 3, "correspondences": [], "error": "x"}"#,
                "exactly one",
            ),
            (r#"{"request_id": 3, "correspondences": [[65, 0, 0, 0, 1]]}"#, "outside"),
            (
                r#"{"request_id": 3, "correspondences": [[-0.1, 0, 0, 0, 1]]}"#,
                "outside",
            ),
            (r#"{"request_id": 3, "error": "model failed"}"#, "model failed"),
        ];
        for (line, needle) in cases {
            let e = validate_response(&parse(line), &req(3)).unwrap_err().to_string();
            assert!(e.contains(needle), "{line}: {e}");
        }
    }

    #[test]
    fn request_serializes_with_protocol_field_names() {
        let v: serde_json::Value = serde_json::to_value(req(7)).unwrap();
        for k in [
            "request_id",
            "query_image_path",
            "candidate_image_path",
            "image_side",
            "max_keypoints",
        ] {
            assert!(v.get(k).is_some(), "{k}");
        }
    }

    #[test]
    fn unknown_matcher_is_rejected() {
        assert!(matches!(
            create_matcher("no-such-matcher-id"),
            Err(MatchError::UnknownBackend(_))
        ));
        assert_eq!(create_matcher(BUILTIN).unwrap().id(), BUILTIN);
    }
}
