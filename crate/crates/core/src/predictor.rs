//! Answer backends. Real models run as child processes speaking one JSON
//! object per line on stdin/stdout; stub backends answer deterministically.
//!
//! Wire format (v1), UTF-8, one line each, no pretty-printing:
//!
//! ```text
//! request:  {"v":1,"video_id":…,"category_id":…,"question":…,"frames":[…]}
//! response: {"v":1,"video_id":…,"category_id":…,"raw_answer":…}
//! ```

use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::str::FromStr;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PROTOCOL_VERSION: u32 = 1;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Clone, PartialEq)]
pub struct PredictRequest {
    pub video_id: String,
    pub category_id: String,
    pub question: String,
    pub frame_paths: Vec<PathBuf>,
    /// Mean instability of the video; only the threshold stub reads it.
    pub mean_instability: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictResponse {
    pub video_id: String,
    pub category_id: String,
    pub raw_answer: String,
    /// Set when the backend failed; `raw_answer` is then empty.
    pub diagnostic: Option<String>,
}

impl PredictResponse {
    fn answer(req: &PredictRequest, raw: impl Into<String>) -> Self {
        PredictResponse {
            video_id: req.video_id.clone(),
            category_id: req.category_id.clone(),
            raw_answer: raw.into(),
            diagnostic: None,
        }
    }

    fn failed(req: &PredictRequest, diagnostic: String) -> Self {
        log::warn!(
            "predictor failure for {}/{}: {diagnostic}",
            req.video_id,
            req.category_id
        );
        PredictResponse {
            video_id: req.video_id.clone(),
            category_id: req.category_id.clone(),
            raw_answer: String::new(),
            diagnostic: Some(diagnostic),
        }
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    v: u32,
    video_id: &'a str,
    category_id: &'a str,
    question: &'a str,
    frames: Vec<String>,
}

#[derive(Deserialize)]
struct WireResponse {
    v: u32,
    video_id: String,
    category_id: String,
    raw_answer: String,
}

/// Serializes a request as one protocol line (without the trailing newline).
pub fn encode_request(req: &PredictRequest) -> String {
    serde_json::to_string(&WireRequest {
        v: PROTOCOL_VERSION,
        video_id: &req.video_id,
        category_id: &req.category_id,
        question: &req.question,
        frames: req
            .frame_paths
            .iter()
            .map(|p| p.to_string_lossy().into_owned())
            .collect(),
    })
    .expect("request serializes")
}

/// Parses one response line and checks it echoes the request.
pub fn decode_response(line: &str, req: &PredictRequest) -> std::result::Result<String, String> {
    let resp: WireResponse =
        serde_json::from_str(line.trim_end()).map_err(|e| format!("malformed response line: {e}"))?;
    if resp.v != PROTOCOL_VERSION {
        return Err(format!("unsupported protocol version {}", resp.v));
    }
    if resp.video_id != req.video_id || resp.category_id != req.category_id {
        return Err(format!(
            "mismatched echo: expected {}/{}, got {}/{}",
            req.video_id, req.category_id, resp.video_id, resp.category_id
        ));
    }
    Ok(resp.raw_answer)
}

pub trait Predictor: Send {
    /// Never fails: backend errors come back as an empty answer plus a diagnostic.
    fn predict(&mut self, req: &PredictRequest) -> PredictResponse;
}

/// Answers "no" to everything.
#[derive(Debug, Default, Clone, Copy)]
pub struct AlwaysNo;

impl Predictor for AlwaysNo {
    fn predict(&mut self, req: &PredictRequest) -> PredictResponse {
        PredictResponse::answer(req, "no")
    }
}

/// Answers "yes" iff the video's mean instability exceeds the threshold.
#[derive(Debug, Clone, Copy)]
pub struct Threshold(pub f64);

impl Predictor for Threshold {
    fn predict(&mut self, req: &PredictRequest) -> PredictResponse {
        match req.mean_instability {
            Some(s) if s > self.0 => PredictResponse::answer(req, "yes"),
            _ => PredictResponse::answer(req, "no"),
        }
    }
}

struct ChildState {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

/// Child process speaking the line protocol. Requests are strictly
/// sequential; a child that exits or times out is killed and respawned on
/// the next request.
pub struct CommandPredictor {
    program: String,
    args: Vec<String>,
    timeout: Duration,
    state: Option<ChildState>,
}

impl CommandPredictor {
    pub fn new(program: impl Into<String>, args: Vec<String>, timeout: Duration) -> Self {
        CommandPredictor {
            program: program.into(),
            args,
            timeout,
            state: None,
        }
    }

    fn spawn(&self) -> std::io::Result<ChildState> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            let mut reader = BufReader::new(stdout);
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
        });
        Ok(ChildState {
            child,
            stdin,
            lines: rx,
        })
    }

    fn shutdown(&mut self) {
        if let Some(mut s) = self.state.take() {
            let _ = s.child.kill();
            let _ = s.child.wait();
        }
    }

    fn exchange(&mut self, req: &PredictRequest) -> std::result::Result<String, String> {
        if req.frame_paths.is_empty() {
            return Err("request has no frames".into());
        }
        if let Some(missing) = req.frame_paths.iter().find(|p| !p.exists()) {
            return Err(format!("frame {} does not exist", missing.display()));
        }
        if self.state.is_none() {
            let spawned = self
                .spawn()
                .map_err(|e| format!("failed to start {}: {e}", self.program))?;
            self.state = Some(spawned);
        }
        let state = self.state.as_mut().expect("child running");
        let mut line = encode_request(req);
        line.push('\n');
        if let Err(e) = state
            .stdin
            .write_all(line.as_bytes())
            .and_then(|_| state.stdin.flush())
        {
            self.shutdown();
            return Err(format!("child exited: {e}"));
        }
        match state.lines.recv_timeout(self.timeout) {
            Ok(Ok(resp)) => decode_response(&resp, req),
            Ok(Err(e)) => {
                self.shutdown();
                Err(format!("reading child output: {e}"))
            }
            Err(RecvTimeoutError::Disconnected) => {
                self.shutdown();
                Err("child exited".into())
            }
            Err(RecvTimeoutError::Timeout) => {
                self.shutdown();
                Err(format!("timed out after {:?}", self.timeout))
            }
        }
    }
}

impl Predictor for CommandPredictor {
    fn predict(&mut self, req: &PredictRequest) -> PredictResponse {
        match self.exchange(req) {
            Ok(raw) => PredictResponse::answer(req, raw),
            Err(diag) => PredictResponse::failed(req, diag),
        }
    }
}

impl Drop for CommandPredictor {
    fn drop(&mut self) {
        // Closing stdin first lets well-behaved children exit on EOF.
        if let Some(mut s) = self.state.take() {
            drop(s.stdin);
            match s.child.try_wait() {
                Ok(Some(_)) => {}
                _ => {
                    std::thread::sleep(Duration::from_millis(20));
                    if !matches!(s.child.try_wait(), Ok(Some(_))) {
                        let _ = s.child.kill();
                    }
                    let _ = s.child.wait();
                }
            }
        }
    }
}

/// Backend selection as written on the command line:
/// `always_no`, `threshold:<value>`, or `cmd:<program> [args…]`.
#[derive(Debug, Clone, PartialEq)]
pub enum BackendSpec {
    AlwaysNo,
    Threshold(f64),
    Command {
        program: String,
        args: Vec<String>,
        timeout: Duration,
    },
}

impl BackendSpec {
    /// A fresh backend instance; each worker owns its own.
    pub fn instantiate(&self) -> Box<dyn Predictor> {
        match self {
            BackendSpec::AlwaysNo => Box::new(AlwaysNo),
            BackendSpec::Threshold(t) => Box::new(Threshold(*t)),
            BackendSpec::Command {
                program,
                args,
                timeout,
            } => Box::new(CommandPredictor::new(program.clone(), args.clone(), *timeout)),
        }
    }

    pub fn with_timeout(self, t: Duration) -> Self {
        match self {
            BackendSpec::Command { program, args, .. } => BackendSpec::Command {
                program,
                args,
                timeout: t,
            },
            other => other,
        }
    }
}

impl FromStr for BackendSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "always_no" {
            return Ok(BackendSpec::AlwaysNo);
        }
        if let Some(v) = s.strip_prefix("threshold:") {
            let t = v
                .parse::<f64>()
                .map_err(|_| Error::InvalidParam(format!("bad threshold \"{v}\"")))?;
            return Ok(BackendSpec::Threshold(t));
        }
        if let Some(cmd) = s.strip_prefix("cmd:") {
            let mut parts = cmd.split_whitespace().map(str::to_string);
            let program = parts
                .next()
                .ok_or_else(|| Error::InvalidParam("cmd backend needs a program".into()))?;
            return Ok(BackendSpec::Command {
                program,
                args: parts.collect(),
                timeout: DEFAULT_TIMEOUT,
            });
        }
        Err(Error::InvalidParam(format!(
            "unknown predictor backend \"{s}\" (expected always_no, threshold:<x>, cmd:<program>)"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qa_eval::{parse_answer, Answer};

    fn request(dir: &std::path::Path) -> PredictRequest {
        let frame = dir.join("idx_00000.png");
        std::fs::write(&frame, b"x").unwrap();
        PredictRequest {
            video_id: "vid".into(),
            category_id: "flicker".into(),
            question: "Does this video exhibit flicker?".into(),
            frame_paths: vec![frame],
            mean_instability: Some(2.0),
        }
    }

    fn sh(script: &str) -> CommandPredictor {
        CommandPredictor::new("sh", vec!["-c".into(), script.into()], Duration::from_secs(5))
    }

    // Echoes ids from the request and answers "yes".
    const ECHO_YES: &str = r#"while IFS= read -r line; do
        vid=$(printf '%s' "$line" | sed 's/.*"video_id":"\([^"]*\)".*/\1/')
        cat=$(printf '%s' "$line" | sed 's/.*"category_id":"\([^"]*\)".*/\1/')
        printf '{"v":1,"video_id":"%s","category_id":"%s","raw_answer":"yes"}\n' "$vid" "$cat"
    done"#;

    #[test]
    fn request_line_format() {
        let req = PredictRequest {
            video_id: "a".into(),
            category_id: "b".into(),
            question: "q?".into(),
            frame_paths: vec!["/f/1.png".into()],
            mean_instability: None,
        };
        assert_eq!(
            encode_request(&req),
            r#"{"v":1,"video_id":"a","category_id":"b","question":"q?","frames":["/f/1.png"]}"#
        );
    }

    #[test]
    fn stubs() {
        let dir = tempfile::tempdir().unwrap();
        let req = request(dir.path());
        assert_eq!(AlwaysNo.predict(&req).raw_answer, "no");
        assert_eq!(Threshold(1.0).predict(&req).raw_answer, "yes");
        assert_eq!(Threshold(3.0).predict(&req).raw_answer, "no");
    }

    #[test]
    fn echo_child_answers_yes() {
        let dir = tempfile::tempdir().unwrap();
        let req = request(dir.path());
        let mut p = sh(ECHO_YES);
        for _ in 0..3 {
            let resp = p.predict(&req);
            assert_eq!(resp.diagnostic, None);
            assert_eq!(parse_answer(&resp.raw_answer), Answer::Yes);
        }
    }

    #[test]
    fn garbage_child_is_failure() {
        let dir = tempfile::tempdir().unwrap();
        let req = request(dir.path());
        let mut p = sh("while read l; do echo 'not json'; done");
        let resp = p.predict(&req);
        assert_eq!(resp.raw_answer, "");
        assert!(resp.diagnostic.unwrap().contains("malformed"));
        assert_eq!(parse_answer(&resp.raw_answer), Answer::Failure);
        // The child stays usable for the next request.
        assert!(p.predict(&req).diagnostic.unwrap().contains("malformed"));
    }

    #[test]
    fn mismatched_echo_is_failure() {
        let dir = tempfile::tempdir().unwrap();
        let req = request(dir.path());
        let mut p = sh(r#"while read l; do echo '{"v":1,"video_id":"other","category_id":"flicker","raw_answer":"yes"}'; done"#);
        assert!(p.predict(&req).diagnostic.unwrap().contains("mismatched echo"));
    }

    #[test]
    fn exiting_child_is_failure() {
        let dir = tempfile::tempdir().unwrap();
        let req = request(dir.path());
        let mut p = sh("exit 0");
        let resp = p.predict(&req);
        assert_eq!(resp.raw_answer, "");
        assert!(resp.diagnostic.is_some());
    }

    #[test]
    fn slow_child_times_out() {
        let dir = tempfile::tempdir().unwrap();
        let req = request(dir.path());
        let mut p = CommandPredictor::new(
            "sh",
            vec!["-c".into(), "while read l; do sleep 5; done".into()],
            Duration::from_millis(200),
        );
        let resp = p.predict(&req);
        assert!(resp.diagnostic.unwrap().contains("timed out"));
    }

    #[test]
    fn missing_program_is_failure() {
        let dir = tempfile::tempdir().unwrap();
        let req = request(dir.path());
        let mut p = CommandPredictor::new("/nonexistent/predictor", vec![], DEFAULT_TIMEOUT);
        assert!(p.predict(&req).diagnostic.unwrap().contains("failed to start"));
    }

    #[test]
    fn backend_spec_parsing() {
        assert_eq!("always_no".parse::<BackendSpec>().unwrap(), BackendSpec::AlwaysNo);
        assert_eq!("threshold:0.5".parse::<BackendSpec>().unwrap(), BackendSpec::Threshold(0.5));
        match "cmd:python3 model.py --fast".parse::<BackendSpec>().unwrap() {
            BackendSpec::Command { program, args, timeout } => {
                assert_eq!(program, "python3");
                assert_eq!(args, vec!["model.py", "--fast"]);
                assert_eq!(timeout, DEFAULT_TIMEOUT);
            }
            other => panic!("{other:?}"),
        }
        assert!("gpt".parse::<BackendSpec>().is_err());
        assert!("threshold:x".parse::<BackendSpec>().is_err());
    }
}
