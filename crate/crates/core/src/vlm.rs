//! Video question-answering monitor for task-progression failures.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{self, Receiver, TryRecvError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const API_KEY_ENV: &str = "SENTINEL_VLM_API_KEY";
/// Most frames attached to a single request.
pub const MAX_FRAMES: usize = 30;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

const START_MARKER: &str = "[start of output]";
const END_MARKER: &str = "[end of output]";
const ASSESSMENT_KEY: &str = "Overall assessment:";

const VIDEO_QA: &str = include_str!("../templates/video_qa.txt");
const IMAGE_QA: &str = include_str!("../templates/image_qa.txt");
const SUCCESS_VIDEO_CONTEXT: &str = include_str!("../templates/success_video_context.txt");
const SUCCESS_VIDEO_QUESTIONS: &str = include_str!("../templates/success_video_questions.txt");
const GOAL_IMAGES_CONTEXT: &str = include_str!("../templates/goal_images_context.txt");
const GOAL_IMAGES_QUESTIONS: &str = include_str!("../templates/goal_images_questions.txt");

/// Built-in task descriptions by key.
pub const TASKS: [(&str, &str); 3] = [
    ("cover", include_str!("../templates/task_cover.txt")),
    ("close", include_str!("../templates/task_close.txt")),
    ("push_chair", include_str!("../templates/task_push_chair.txt")),
];

pub fn task_description(key: &str) -> Option<&'static str> {
    TASKS.iter().find(|(k, _)| *k == key).map(|(_, d)| *d)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VlmError {
    #[error("invalid prompt: {0}")]
    InvalidPrompt(String),
    #[error("malformed response: {0}")]
    Parse(String),
    #[error("monitor unavailable: {0}")]
    Unavailable(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("missing frame `{0}`")]
    MissingFrame(String),
    #[error("ensemble needs an odd, nonzero number of votes, got {0}")]
    EvenEnsemble(usize),
    #[error("a request is already in flight")]
    Busy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    VideoQa,
    ImageQa,
    VideoQaSuccessVideo,
    VideoQaGoalImages,
}

impl TemplateId {
    pub const ALL: [TemplateId; 4] = [Self::VideoQa, Self::ImageQa, Self::VideoQaSuccessVideo, Self::VideoQaGoalImages];
    /// The three prompts combined by majority vote.
    pub const ENSEMBLE: [TemplateId; 3] = [Self::VideoQa, Self::VideoQaSuccessVideo, Self::VideoQaGoalImages];

    pub fn name(self) -> &'static str {
        match self {
            Self::VideoQa => "video_qa",
            Self::ImageQa => "image_qa",
            Self::VideoQaSuccessVideo => "video_qa_success_video",
            Self::VideoQaGoalImages => "video_qa_goal_images",
        }
    }

    fn needs_auxiliary(self) -> bool {
        matches!(self, Self::VideoQaSuccessVideo | Self::VideoQaGoalImages)
    }
}

impl std::str::FromStr for TemplateId {
    type Err = VlmError;

    fn from_str(s: &str) -> Result<Self, VlmError> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| VlmError::InvalidPrompt(format!("unknown template `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorPrompt {
    pub template_id: TemplateId,
    pub task_description: String,
    pub elapsed_seconds: f64,
    pub time_limit_seconds: f64,
    pub frames: Vec<String>,
    /// Success video frames or goal images for the variant templates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auxiliary_frames: Option<Vec<String>>,
}

impl MonitorPrompt {
    pub fn validate(&self) -> Result<(), VlmError> {
        let bad = |m: &str| Err(VlmError::InvalidPrompt(m.into()));
        if !(self.elapsed_seconds.is_finite() && self.elapsed_seconds > 0.0) {
            return bad("elapsed time must be positive");
        }
        if !(self.time_limit_seconds.is_finite() && self.time_limit_seconds > 0.0) {
            return bad("time limit must be positive");
        }
        if self.frames.is_empty() {
            return bad("at least one frame is required");
        }
        if self.task_description.trim().is_empty() {
            return bad("task description is empty");
        }
        match (&self.auxiliary_frames, self.template_id.needs_auxiliary()) {
            (None, true) => bad("this template needs auxiliary frames"),
            (Some(a), true) if a.is_empty() => bad("auxiliary frames are empty"),
            (Some(_), false) => bad("this template takes no auxiliary frames"),
            _ => Ok(()),
        }
    }

    /// Frames attached to the request: the last frame for image QA, else the
    /// video capped at [`MAX_FRAMES`].
    pub fn request_frames(&self) -> Vec<String> {
        match self.template_id {
            TemplateId::ImageQa => self.frames.last().cloned().into_iter().collect(),
            _ => cap_frames(&self.frames, MAX_FRAMES),
        }
    }
}

fn render_seconds(s: f64) -> String {
    format!("{}", s.round() as i64)
}

pub fn build_prompt(p: &MonitorPrompt) -> Result<String, VlmError> {
    p.validate()?;
    let text = match p.template_id {
        TemplateId::VideoQa => VIDEO_QA.to_string(),
        TemplateId::ImageQa => IMAGE_QA.to_string(),
        TemplateId::VideoQaSuccessVideo => compose_variant(SUCCESS_VIDEO_CONTEXT, SUCCESS_VIDEO_QUESTIONS),
        TemplateId::VideoQaGoalImages => compose_variant(GOAL_IMAGES_CONTEXT, GOAL_IMAGES_QUESTIONS),
    };
    Ok(text
        .replace("{DESCRIPTION}", &p.task_description)
        .replace("{TIME_LIMIT}", &render_seconds(p.time_limit_seconds))
        .replace("{TIME}", &render_seconds(p.elapsed_seconds)))
}

/// Video QA with an extra context paragraph after the role paragraph and an
/// extended questions line.
fn compose_variant(context: &str, questions: &str) -> String {
    let mut out = Vec::new();
    let mut lines = VIDEO_QA.split('\n');
    out.push(lines.next().unwrap_or_default());
    out.push("");
    out.push(context);
    for line in lines {
        out.push(if line.starts_with("Questions:") { questions } else { line });
    }
    out.join("\n")
}

/// Frames `0, nu*k, 2*nu*k, ...` plus the final frame.
pub fn subsample_frames<T: Clone>(frames: &[T], k: usize, nu: usize) -> Result<Vec<T>, VlmError> {
    if frames.is_empty() {
        return Err(VlmError::InvalidPrompt("no frames to subsample".into()));
    }
    if k == 0 || nu == 0 {
        return Err(VlmError::InvalidPrompt("stride factors must be at least 1".into()));
    }
    let stride = k * nu;
    let mut out: Vec<T> = frames.iter().step_by(stride).cloned().collect();
    if !(frames.len() - 1).is_multiple_of(stride) {
        out.push(frames[frames.len() - 1].clone());
    }
    Ok(out)
}

/// Uniformly spaced selection of at most `max` frames keeping the first and last.
pub fn cap_frames<T: Clone>(frames: &[T], max: usize) -> Vec<T> {
    let n = frames.len();
    if n <= max || max == 0 {
        return frames.to_vec();
    }
    if max == 1 {
        return vec![frames[n - 1].clone()];
    }
    (0..max)
        .map(|j| frames[((j * (n - 1)) as f64 / (max - 1) as f64).round() as usize].clone())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assessment {
    Ok,
    Failure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorResponse {
    pub raw_text: String,
    pub questions: String,
    pub answers: String,
    pub analysis: String,
    pub assessment: Assessment,
}

fn parse_err(m: impl Into<String>) -> VlmError {
    VlmError::Parse(m.into())
}

pub fn parse_response(raw: &str) -> Result<MonitorResponse, VlmError> {
    let start = raw.find(START_MARKER).ok_or_else(|| parse_err("missing start marker"))?;
    let body_start = start + START_MARKER.len();
    let end = raw[body_start..].find(END_MARKER).ok_or_else(|| parse_err("missing end marker"))? + body_start;
    let body = &raw[body_start..end];

    let mut assessment = None;
    for line in body.lines() {
        let Some(rest) = line.trim_start().strip_prefix(ASSESSMENT_KEY) else { continue };
        let value = match rest.trim().to_ascii_lowercase().as_str() {
            "ok" => Assessment::Ok,
            "failure" => Assessment::Failure,
            other => return Err(parse_err(format!("unrecognized assessment `{other}`"))),
        };
        match assessment {
            Some(prev) if prev != value => return Err(parse_err("conflicting assessments")),
            _ => assessment = Some(value),
        }
    }
    let assessment = assessment.ok_or_else(|| parse_err("no overall assessment"))?;

    Ok(MonitorResponse {
        raw_text: raw.to_string(),
        questions: section(body, "Questions:", &["Answers:", "Analysis:", ASSESSMENT_KEY]),
        answers: section(body, "Answers:", &["Analysis:", ASSESSMENT_KEY]),
        analysis: section(body, "Analysis:", &[ASSESSMENT_KEY]),
        assessment,
    })
}

fn section(body: &str, key: &str, stops: &[&str]) -> String {
    let Some(i) = body.find(key) else { return String::new() };
    let rest = &body[i + key.len()..];
    let end = stops.iter().filter_map(|s| rest.find(s)).min().unwrap_or(rest.len());
    rest[..end].trim().to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleVerdict {
    pub votes: Vec<Assessment>,
    pub decision: Assessment,
}

pub fn ensemble_vote(votes: &[Assessment]) -> Result<EnsembleVerdict, VlmError> {
    if votes.len().is_multiple_of(2) {
        return Err(VlmError::EvenEnsemble(votes.len()));
    }
    let failures = votes.iter().filter(|v| **v == Assessment::Failure).count();
    let decision = if 2 * failures > votes.len() { Assessment::Failure } else { Assessment::Ok };
    Ok(EnsembleVerdict { votes: votes.to_vec(), decision })
}

/// Rendered prompt plus frame references, as handed to a transport.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VlmRequest {
    pub template_id: TemplateId,
    pub text: String,
    pub frames: Vec<String>,
    pub auxiliary_frames: Vec<String>,
}

impl VlmRequest {
    pub fn from_prompt(p: &MonitorPrompt) -> Result<Self, VlmError> {
        Ok(Self {
            template_id: p.template_id,
            text: build_prompt(p)?,
            frames: p.request_frames(),
            auxiliary_frames: p.auxiliary_frames.as_deref().map(|a| cap_frames(a, MAX_FRAMES)).unwrap_or_default(),
        })
    }

    /// Hex SHA-256 over the text and frame references.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.text.as_bytes());
        for f in self.auxiliary_frames.iter().chain(&self.frames) {
            h.update([0u8]);
            h.update(f.as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TransportError {
    #[error("transient failure: {0}")]
    Transient(String),
    #[error("request timed out")]
    Timeout,
    #[error("authentication: {0}")]
    Auth(String),
    #[error("{0}")]
    Fatal(String),
    #[error("missing frame `{0}`")]
    MissingFrame(String),
}

pub trait Transport: Send + Sync {
    fn send(&self, request: &VlmRequest, timeout: Duration) -> Result<String, TransportError>;
}

/// Offline transport: a scripted queue of replies, or a fixture directory.
///
/// Fixture lookup order is `<request hash>.txt`, `<template name>.txt`,
/// then `default.txt`.
#[derive(Debug)]
pub struct MockTransport {
    script: Mutex<VecDeque<Result<String, TransportError>>>,
    fixtures: Option<PathBuf>,
}

impl MockTransport {
    pub fn scripted(replies: impl IntoIterator<Item = Result<String, TransportError>>) -> Self {
        Self { script: Mutex::new(replies.into_iter().collect()), fixtures: None }
    }

    pub fn fixtures(dir: impl Into<PathBuf>) -> Self {
        Self { script: Mutex::new(VecDeque::new()), fixtures: Some(dir.into()) }
    }
}

impl Transport for MockTransport {
    fn send(&self, request: &VlmRequest, _timeout: Duration) -> Result<String, TransportError> {
        if let Some(reply) = self.script.lock().expect("mock script lock").pop_front() {
            return reply;
        }
        let dir = self.fixtures.as_ref().ok_or_else(|| TransportError::Fatal("mock script exhausted".into()))?;
        for name in [request.hash(), request.template_id.name().to_string(), "default".to_string()] {
            let path = dir.join(format!("{name}.txt"));
            if path.is_file() {
                return std::fs::read_to_string(&path).map_err(|e| TransportError::Fatal(e.to_string()));
            }
        }
        Err(TransportError::Fatal(format!("no fixture for request {} in {}", request.hash(), dir.display())))
    }
}

/// Chat-completion style HTTP endpoint.
pub struct HttpTransport {
    endpoint: String,
    model: String,
    api_key: String,
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, api_key: impl Into<String>) -> Result<Self, VlmError> {
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| VlmError::Unavailable(e.to_string()))?;
        Ok(Self { endpoint: endpoint.into(), model: model.into(), api_key: api_key.into(), client })
    }

    /// Reads the credential from `SENTINEL_VLM_API_KEY`.
    pub fn from_env(endpoint: impl Into<String>, model: impl Into<String>) -> Result<Self, VlmError> {
        match std::env::var(API_KEY_ENV) {
            Ok(key) if !key.trim().is_empty() => Self::new(endpoint, model, key),
            _ => Err(VlmError::Auth(format!("{API_KEY_ENV} is not set"))),
        }
    }

    pub fn body(&self, request: &VlmRequest) -> Result<serde_json::Value, TransportError> {
        let mut content = vec![serde_json::json!({ "type": "text", "text": request.text })];
        for frame in request.auxiliary_frames.iter().chain(&request.frames) {
            content.push(serde_json::json!({ "type": "image_url", "image_url": { "url": data_uri(Path::new(frame))? } }));
        }
        Ok(serde_json::json!({
            "model": self.model,
            "messages": [{ "role": "user", "content": content }],
        }))
    }
}

fn data_uri(path: &Path) -> Result<String, TransportError> {
    let bytes = std::fs::read(path).map_err(|_| TransportError::MissingFrame(path.display().to_string()))?;
    let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        _ => "image/png",
    };
    Ok(format!("data:{mime};base64,{}", base64::engine::general_purpose::STANDARD.encode(bytes)))
}

impl Transport for HttpTransport {
    fn send(&self, request: &VlmRequest, timeout: Duration) -> Result<String, TransportError> {
        let body = self.body(request)?;
        let resp = self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .timeout(timeout)
            .json(&body)
            .send()
            .map_err(|e| if e.is_timeout() { TransportError::Timeout } else { TransportError::Transient(e.to_string()) })?;
        let status = resp.status();
        if status == reqwest::StatusCode::UNAUTHORIZED || status == reqwest::StatusCode::FORBIDDEN {
            return Err(TransportError::Auth(format!("endpoint returned {status}")));
        }
        if status.is_server_error() || status == reqwest::StatusCode::TOO_MANY_REQUESTS {
            return Err(TransportError::Transient(format!("endpoint returned {status}")));
        }
        if !status.is_success() {
            return Err(TransportError::Fatal(format!("endpoint returned {status}")));
        }
        let json: serde_json::Value = resp.json().map_err(|e| TransportError::Fatal(e.to_string()))?;
        json["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| TransportError::Fatal("response has no choices[0].message.content".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryOutcome {
    pub response: MonitorResponse,
    pub latency_seconds: f64,
    pub attempts: u32,
}

/// Sends one prompt, retrying once on a transient failure or timeout.
pub fn query_monitor(p: &MonitorPrompt, transport: &dyn Transport, timeout: Duration) -> Result<QueryOutcome, VlmError> {
    let request = VlmRequest::from_prompt(p)?;
    let started = Instant::now();
    let mut attempts = 0;
    let text = loop {
        attempts += 1;
        match transport.send(&request, timeout) {
            Ok(text) => break text,
            Err(TransportError::Transient(_) | TransportError::Timeout) if attempts < 2 => continue,
            Err(TransportError::Auth(m)) => return Err(VlmError::Auth(m)),
            Err(TransportError::MissingFrame(f)) => return Err(VlmError::MissingFrame(f)),
            Err(e) => return Err(VlmError::Unavailable(e.to_string())),
        }
    };
    Ok(QueryOutcome { response: parse_response(&text)?, latency_seconds: started.elapsed().as_secs_f64(), attempts })
}

/// Non-blocking monitor with at most one request in flight.
pub struct AsyncMonitor {
    transport: Arc<dyn Transport>,
    timeout: Duration,
    pending: Option<(usize, Receiver<Result<QueryOutcome, VlmError>>)>,
    latencies: Vec<f64>,
}

impl AsyncMonitor {
    pub fn new(transport: Arc<dyn Transport>, timeout: Duration) -> Self {
        Self { transport, timeout, pending: None, latencies: Vec::new() }
    }

    pub fn in_flight(&self) -> bool {
        self.pending.is_some()
    }

    /// Issues a query tagged with the timestep at which it was issued.
    pub fn submit(&mut self, prompt: MonitorPrompt, issued_at: usize) -> Result<(), VlmError> {
        if self.pending.is_some() {
            return Err(VlmError::Busy);
        }
        let (tx, rx) = mpsc::channel();
        let transport = Arc::clone(&self.transport);
        let timeout = self.timeout;
        thread::spawn(move || {
            let _ = tx.send(query_monitor(&prompt, transport.as_ref(), timeout));
        });
        self.pending = Some((issued_at, rx));
        Ok(())
    }

    /// Returns the finished query, if any, without blocking.
    pub fn poll(&mut self) -> Option<(usize, Result<QueryOutcome, VlmError>)> {
        let (issued_at, rx) = self.pending.as_ref()?;
        let result = match rx.try_recv() {
            Ok(r) => r,
            Err(TryRecvError::Empty) => return None,
            Err(TryRecvError::Disconnected) => Err(VlmError::Unavailable("worker exited".into())),
        };
        let issued_at = *issued_at;
        self.pending = None;
        self.record(&result);
        Some((issued_at, result))
    }

    /// Blocks until the in-flight query finishes.
    pub fn wait(&mut self) -> Option<(usize, Result<QueryOutcome, VlmError>)> {
        let (issued_at, rx) = self.pending.take()?;
        let result = rx.recv().unwrap_or_else(|_| Err(VlmError::Unavailable("worker exited".into())));
        self.record(&result);
        Some((issued_at, result))
    }

    fn record(&mut self, result: &Result<QueryOutcome, VlmError>) {
        if let Ok(o) = result {
            self.latencies.push(o.latency_seconds);
        }
    }

    pub fn mean_latency_seconds(&self) -> Option<f64> {
        (!self.latencies.is_empty()).then(|| self.latencies.iter().sum::<f64>() / self.latencies.len() as f64)
    }
}

/// Response text in the expected output format with the given assessment.
pub fn render_response(questions: &str, answers: &str, analysis: &str, assessment: Assessment) -> String {
    let choice = match assessment {
        Assessment::Ok => "ok",
        Assessment::Failure => "failure",
    };
    format!(
        "{START_MARKER}\nQuestions: {questions}\nAnswers: {answers}\nAnalysis: {analysis}\n{ASSESSMENT_KEY} {choice}\n{END_MARKER}"
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prompt(t: TemplateId) -> MonitorPrompt {
        MonitorPrompt {
            template_id: t,
            task_description: task_description("close").unwrap().into(),
            elapsed_seconds: 30.0,
            time_limit_seconds: 30.0,
            frames: (0..5).map(|i| format!("f{i}.png")).collect(),
            auxiliary_frames: t.needs_auxiliary().then(|| vec!["goal.png".into()]),
        }
    }

    #[test]
    fn close_description_is_substituted() {
        let text = build_prompt(&prompt(TemplateId::VideoQa)).unwrap();
        assert!(text.contains("close the white box by folding in the two smaller white side lids"));
        assert!(text.contains("up to 30 seconds to complete this task. The current elapsed time is 30 seconds."));
        assert!(!text.contains('{') || text.contains("{CHOICE"));
    }

    #[test]
    fn seconds_are_rounded() {
        let mut p = prompt(TemplateId::ImageQa);
        p.elapsed_seconds = 12.6;
        p.time_limit_seconds = 29.9;
        let text = build_prompt(&p).unwrap();
        assert!(text.contains("up to 30 seconds") && text.contains("elapsed time is 13 seconds"));
    }

    #[test]
    fn goal_variant_has_comparison_paragraph() {
        let text = build_prompt(&prompt(TemplateId::VideoQaGoalImages)).unwrap();
        assert!(text.contains("example images that show what the scene"));
        assert!(text.contains("[start of output]"));
        let base = build_prompt(&prompt(TemplateId::VideoQa)).unwrap();
        assert!(text.len() > base.len());
    }

    #[test]
    fn prompt_validation() {
        let mut p = prompt(TemplateId::VideoQa);
        p.frames.clear();
        assert!(build_prompt(&p).is_err());
        let mut p = prompt(TemplateId::VideoQaSuccessVideo);
        p.auxiliary_frames = None;
        assert!(build_prompt(&p).is_err());
        let mut p = prompt(TemplateId::VideoQa);
        p.elapsed_seconds = 0.0;
        assert!(build_prompt(&p).is_err());
        assert!("video".parse::<TemplateId>().is_err());
    }

    #[test]
    fn image_qa_sends_last_frame_only() {
        assert_eq!(prompt(TemplateId::ImageQa).request_frames(), vec!["f4.png".to_string()]);
        assert_eq!(prompt(TemplateId::VideoQa).request_frames().len(), 5);
    }

    #[test]
    fn subsampling() {
        let f: Vec<usize> = (0..9).collect();
        assert_eq!(subsample_frames(&f, 1, 1).unwrap(), f);
        assert_eq!(subsample_frames(&f, 2, 2).unwrap(), vec![0, 4, 8]);
        assert_eq!(subsample_frames(&f, 3, 2).unwrap(), vec![0, 6, 8]);
        assert_eq!(subsample_frames(&[7], 4, 2).unwrap(), vec![7]);
        assert!(subsample_frames::<usize>(&[], 1, 1).is_err());
        assert!(subsample_frames(&f, 1, 0).is_err());
    }

    #[test]
    fn frame_cap_keeps_endpoints() {
        let f: Vec<usize> = (0..100).collect();
        let c = cap_frames(&f, 30);
        assert_eq!(c.len(), 30);
        assert_eq!((c[0], c[29]), (0, 99));
        assert!(c.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(cap_frames(&f[..10], 30).len(), 10);
    }

    #[test]
    fn parse_round_trip() {
        for a in [Assessment::Ok, Assessment::Failure] {
            let r = parse_response(&render_response("q?", "a.", "fine", a)).unwrap();
            assert_eq!(r.assessment, a);
            assert_eq!(r.questions, "q?");
            assert_eq!(r.analysis, "fine");
        }
    }

    #[test]
    fn parse_tolerates_case_and_whitespace() {
        let raw = "preamble\n[start of output]\nAnalysis: x\nOverall assessment:   FAILURE  \n[end of output]\n";
        assert_eq!(parse_response(raw).unwrap().assessment, Assessment::Failure);
    }

    #[test]
    fn parse_rejects_malformed() {
        for raw in [
            "Overall assessment: ok",
            "[start of output]\nOverall assessment: ok\n",
            "[start of output]\nAnalysis: fine\n[end of output]",
            "[start of output]\nOverall assessment: probably ok\n[end of output]",
            "[start of output]\nOverall assessment: ok\nOverall assessment: failure\n[end of output]",
            "[end of output]\nOverall assessment: ok\n[start of output]",
        ] {
            assert!(parse_response(raw).is_err(), "{raw}");
        }
    }

    #[test]
    fn votes() {
        use Assessment::*;
        assert_eq!(ensemble_vote(&[Ok, Failure, Failure]).unwrap().decision, Failure);
        assert_eq!(ensemble_vote(&[Ok, Ok, Failure]).unwrap().decision, Ok);
        assert_eq!(ensemble_vote(&[Failure]).unwrap().decision, Failure);
        assert!(ensemble_vote(&[Ok, Failure]).is_err());
        assert!(ensemble_vote(&[]).is_err());
    }

    #[test]
    fn retry_once_then_unavailable() {
        let p = prompt(TemplateId::VideoQa);
        let ok = render_response("q", "a", "b", Assessment::Ok);
        let t = MockTransport::scripted([Err(TransportError::Timeout), Ok(ok)]);
        let out = query_monitor(&p, &t, DEFAULT_TIMEOUT).unwrap();
        assert_eq!((out.attempts, out.response.assessment), (2, Assessment::Ok));

        let t = MockTransport::scripted([Err(TransportError::Timeout), Err(TransportError::Transient("x".into()))]);
        assert!(matches!(query_monitor(&p, &t, DEFAULT_TIMEOUT), Err(VlmError::Unavailable(_))));

        let t = MockTransport::scripted([Ok("garbage".into())]);
        assert!(matches!(query_monitor(&p, &t, DEFAULT_TIMEOUT), Err(VlmError::Parse(_))));
    }

    #[test]
    fn fixture_lookup_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = prompt(TemplateId::VideoQa);
        let req = VlmRequest::from_prompt(&p).unwrap();
        let t = MockTransport::fixtures(dir.path());
        assert!(t.send(&req, DEFAULT_TIMEOUT).is_err());
        std::fs::write(dir.path().join("default.txt"), "D").unwrap();
        assert_eq!(t.send(&req, DEFAULT_TIMEOUT).unwrap(), "D");
        std::fs::write(dir.path().join("video_qa.txt"), "T").unwrap();
        assert_eq!(t.send(&req, DEFAULT_TIMEOUT).unwrap(), "T");
        std::fs::write(dir.path().join(format!("{}.txt", req.hash())), "H").unwrap();
        assert_eq!(t.send(&req, DEFAULT_TIMEOUT).unwrap(), "H");
    }

    #[test]
    fn http_needs_key() {
        std::env::remove_var(API_KEY_ENV);
        assert!(matches!(HttpTransport::from_env("http://127.0.0.1:9", "m"), Err(VlmError::Auth(_))));
    }

    #[test]
    fn http_reports_missing_frames() {
        let t = HttpTransport::new("http://127.0.0.1:9", "m", "k").unwrap();
        let mut p = prompt(TemplateId::VideoQa);
        p.frames = vec!["/nonexistent/frame.png".into()];
        let err = query_monitor(&p, &t, Duration::from_millis(200)).unwrap_err();
        assert!(matches!(err, VlmError::MissingFrame(_)));
    }

    #[test]
    fn async_monitor_one_in_flight() {
        let ok = render_response("q", "a", "b", Assessment::Failure);
        let t: Arc<dyn Transport> = Arc::new(MockTransport::scripted([Ok(ok)]));
        let mut m = AsyncMonitor::new(t, DEFAULT_TIMEOUT);
        m.submit(prompt(TemplateId::VideoQa), 40).unwrap();
        assert_eq!(m.submit(prompt(TemplateId::VideoQa), 41), Err(VlmError::Busy));
        let (at, r) = m.wait().unwrap();
        assert_eq!((at, r.unwrap().response.assessment), (40, Assessment::Failure));
        assert!(!m.in_flight());
        assert!(m.mean_latency_seconds().is_some());
    }
}
