//! Completion interface over an HTTP endpoint and deterministic mock backends.
//!
//! [`LlmClient`] owns one [`Backend`], applies the retry budget, enforces stop
//! sequences on whatever the backend returns and counts backend resolutions.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_model::Dataset;
use crate::evaluation::normalize_answer;
use crate::hashing::content_hash;
use crate::prompting::parse_rendered;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("request timed out")]
    Timeout,
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("context length exceeded for prompt {prompt_hash}")]
    ContextLengthExceeded { prompt_hash: String },
    #[error("no scripted completion for prompt {prompt_hash}")]
    FixtureMiss { prompt_hash: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: Box<LlmError> },
    #[error("{path}: {message}")]
    Fixture { path: String, message: String },
}

impl LlmError {
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            LlmError::Timeout | LlmError::Http { .. } | LlmError::Transport(_)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt_text: String,
    pub max_new_tokens: u32,
    pub temperature: f64,
    pub stop_sequences: Vec<String>,
    pub model_id: String,
}

impl CompletionRequest {
    pub fn prompt_hash(&self) -> String {
        content_hash(&self.prompt_text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletionResponse {
    pub text: String,
    pub finish_reason: FinishReason,
    pub latency_ms: u64,
}

/// What a backend hands back before stop enforcement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawCompletion {
    pub text: String,
    pub finish_reason: FinishReason,
}

impl RawCompletion {
    pub fn stop(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            finish_reason: FinishReason::Stop,
        }
    }
}

pub trait Backend: Send + Sync {
    fn model_id(&self) -> &str;
    fn complete_raw(&self, req: &CompletionRequest) -> Result<RawCompletion, LlmError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_backoff: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    pub fn no_backoff(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            base_backoff: Duration::ZERO,
        }
    }

    fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u32 << (attempt - 1).min(6);
        (self.base_backoff * factor).min(Duration::from_secs(30))
    }
}

/// Leading spaces and tabs are dropped, then the text is cut at the earliest
/// occurrence of any stop sequence.
pub fn apply_stops(text: &str, stops: &[String]) -> (String, bool) {
    let text = text.trim_start_matches([' ', '\t']);
    let cut = stops
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min();
    match cut {
        Some(i) => (text[..i].to_owned(), true),
        None => (text.to_owned(), false),
    }
}

pub struct LlmClient {
    backend: Box<dyn Backend>,
    retry: RetryPolicy,
    calls: AtomicU64,
}

impl LlmClient {
    pub fn new(backend: Box<dyn Backend>, retry: RetryPolicy) -> Self {
        Self {
            backend,
            retry,
            calls: AtomicU64::new(0),
        }
    }

    pub fn model_id(&self) -> &str {
        self.backend.model_id()
    }

    /// Backend resolutions since construction or the last reset, retries included.
    pub fn call_count(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset_call_count(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }

    pub fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        if req.prompt_text.is_empty() {
            return Err(LlmError::InvalidRequest("empty prompt".into()));
        }
        if req.max_new_tokens == 0 {
            return Err(LlmError::InvalidRequest("max_new_tokens must be positive".into()));
        }
        if req.temperature.is_nan() || req.temperature < 0.0 {
            return Err(LlmError::InvalidRequest("temperature must be non-negative".into()));
        }
        let attempts = self.retry.max_attempts.max(1);
        let started = Instant::now();
        let mut attempt = 0;
        loop {
            attempt += 1;
            self.calls.fetch_add(1, Ordering::SeqCst);
            match self.backend.complete_raw(req) {
                Ok(raw) => {
                    let (text, stopped) = apply_stops(&raw.text, &req.stop_sequences);
                    return Ok(CompletionResponse {
                        text,
                        finish_reason: if stopped { FinishReason::Stop } else { raw.finish_reason },
                        latency_ms: started.elapsed().as_millis() as u64,
                    });
                }
                Err(e) if e.is_retryable() && attempt < attempts => {
                    log::warn!("attempt {attempt}/{attempts} failed: {e}");
                    std::thread::sleep(self.retry.delay(attempt));
                }
                Err(e) if e.is_retryable() => {
                    return Err(LlmError::RetriesExhausted {
                        attempts: attempt,
                        last: Box::new(e),
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FixtureLine {
    prompt_hash: String,
    completion_text: String,
}

/// Replays completions keyed by prompt hash.
pub struct ScriptedMock {
    model_id: String,
    fixtures: HashMap<String, String>,
}

impl ScriptedMock {
    pub fn new(model_id: impl Into<String>, fixtures: HashMap<String, String>) -> Self {
        Self {
            model_id: model_id.into(),
            fixtures,
        }
    }

    /// Loads `{prompt_hash, completion_text}` lines. Later lines win.
    pub fn from_file(model_id: impl Into<String>, path: &Path) -> Result<Self, LlmError> {
        let fixture_err = |message: String| LlmError::Fixture {
            path: path.display().to_string(),
            message,
        };
        let file = File::open(path).map_err(|e| fixture_err(e.to_string()))?;
        let mut fixtures = HashMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| fixture_err(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let f: FixtureLine = serde_json::from_str(&line)
                .map_err(|e| fixture_err(format!("line {}: {e}", i + 1)))?;
            fixtures.insert(f.prompt_hash, f.completion_text);
        }
        Ok(Self::new(model_id, fixtures))
    }

    pub fn len(&self) -> usize {
        self.fixtures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fixtures.is_empty()
    }
}

impl Backend for ScriptedMock {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn complete_raw(&self, req: &CompletionRequest) -> Result<RawCompletion, LlmError> {
        let prompt_hash = req.prompt_hash();
        self.fixtures
            .get(&prompt_hash)
            .map(RawCompletion::stop)
            .ok_or(LlmError::FixtureMiss { prompt_hash })
    }
}

/// Returns the first 20 characters of the prompt.
pub struct EchoMock {
    model_id: String,
}

impl EchoMock {
    pub fn new(model_id: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
        }
    }
}

impl Backend for EchoMock {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn complete_raw(&self, req: &CompletionRequest) -> Result<RawCompletion, LlmError> {
        Ok(RawCompletion::stop(req.prompt_text.chars().take(20).collect::<String>()))
    }
}

/// Answers with each sample's most frequent gold annotation, matched by the
/// input block's caption and question. Rationale prompts get a short canned
/// rationale naming that answer.
pub struct OracleMock {
    model_id: String,
    answers: HashMap<(String, String), String>,
}

impl OracleMock {
    pub fn new(model_id: impl Into<String>, d: &Dataset) -> Self {
        let answers = d
            .samples()
            .iter()
            .filter_map(|s| {
                let a = s.answers.most_frequent()?;
                Some(((s.caption.clone(), s.question.clone()), a.to_owned()))
            })
            .collect();
        Self {
            model_id: model_id.into(),
            answers,
        }
    }
}

impl Backend for OracleMock {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn complete_raw(&self, req: &CompletionRequest) -> Result<RawCompletion, LlmError> {
        let miss = || LlmError::FixtureMiss {
            prompt_hash: req.prompt_hash(),
        };
        let parsed = parse_rendered(&req.prompt_text).map_err(|_| miss())?;
        let key = (parsed.input.caption, parsed.input.question);
        let answer = self.answers.get(&key).ok_or_else(miss)?;
        Ok(RawCompletion::stop(match parsed.cue.as_str() {
            "Answer" => format!(" {answer}\n"),
            _ => format!(" The scene points to {answer}.\n\n"),
        }))
    }
}

/// Answers with a string that matches no annotation in the dataset.
pub struct AlwaysWrongMock {
    model_id: String,
    answer: String,
}

impl AlwaysWrongMock {
    pub fn new(model_id: impl Into<String>, d: &Dataset) -> Self {
        let taken: std::collections::HashSet<String> = d
            .samples()
            .iter()
            .flat_map(|s| s.answers.as_slice().iter().map(|a| normalize_answer(a)))
            .collect();
        let answer = (0..)
            .map(|i| format!("wrong{i}"))
            .find(|a| !taken.contains(a))
            .unwrap_or_default();
        Self {
            model_id: model_id.into(),
            answer,
        }
    }

    pub fn answer(&self) -> &str {
        &self.answer
    }
}

impl Backend for AlwaysWrongMock {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn complete_raw(&self, req: &CompletionRequest) -> Result<RawCompletion, LlmError> {
        let answer_cue = req.prompt_text.ends_with("\nAnswer:");
        Ok(RawCompletion::stop(if answer_cue {
            format!(" {}\n", self.answer)
        } else {
            " This rationale is unhelpful.\n\n".to_owned()
        }))
    }
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn model_id(&self) -> &str {
        (**self).model_id()
    }

    fn complete_raw(&self, req: &CompletionRequest) -> Result<RawCompletion, LlmError> {
        (**self).complete_raw(req)
    }
}

/// Passes requests through and keeps every raw completion, so a real or
/// synthetic run can be frozen into a [`ScriptedMock`] fixture file.
pub struct RecordingBackend<B> {
    inner: B,
    log: Mutex<Vec<(String, String)>>,
}

impl<B: Backend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    /// Writes the recorded pairs sorted by hash, one per line, deduplicated.
    pub fn write_fixture(&self, path: &Path) -> std::io::Result<usize> {
        let mut entries: Vec<(String, String)> = self.log.lock().unwrap().clone();
        entries.sort();
        entries.dedup_by(|a, b| a.0 == b.0);
        let mut w = BufWriter::new(File::create(path)?);
        for (prompt_hash, completion_text) in &entries {
            let line = serde_json::to_string(&FixtureLine {
                prompt_hash: prompt_hash.clone(),
                completion_text: completion_text.clone(),
            })?;
            writeln!(w, "{line}")?;
        }
        w.flush()?;
        Ok(entries.len())
    }
}

impl<B: Backend> Backend for RecordingBackend<B> {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn complete_raw(&self, req: &CompletionRequest) -> Result<RawCompletion, LlmError> {
        let raw = self.inner.complete_raw(req)?;
        self.log
            .lock()
            .unwrap()
            .push((req.prompt_hash(), raw.text.clone()));
        Ok(raw)
    }
}

#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub url: String,
    pub model_id: String,
    pub token: Option<String>,
    pub timeout: Duration,
}

/// Plain-text completions endpoint (`prompt`, `max_tokens`, `temperature`,
/// `stop` in; `choices[0].text` out).
pub struct HttpBackend {
    cfg: HttpConfig,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: u32,
    temperature: f64,
    #[serde(skip_serializing_if = "<[String]>::is_empty")]
    stop: &'a [String],
}

#[derive(Deserialize)]
struct WireChoice {
    text: String,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

impl HttpBackend {
    pub fn new(cfg: HttpConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { cfg, agent }
    }
}

fn looks_like_context_overflow(body: &str) -> bool {
    let body = body.to_ascii_lowercase();
    body.contains("context") && (body.contains("length") || body.contains("window") || body.contains("maximum"))
}

impl Backend for HttpBackend {
    fn model_id(&self) -> &str {
        &self.cfg.model_id
    }

    fn complete_raw(&self, req: &CompletionRequest) -> Result<RawCompletion, LlmError> {
        let body = WireRequest {
            model: &req.model_id,
            prompt: &req.prompt_text,
            max_tokens: req.max_new_tokens,
            temperature: req.temperature,
            stop: &req.stop_sequences,
        };
        let mut call = self.agent.post(&self.cfg.url);
        if let Some(token) = &self.cfg.token {
            call = call.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = call.send_json(&body).map_err(|e| match e {
            ureq::Error::Timeout(_) => LlmError::Timeout,
            ureq::Error::Io(io) if io.kind() == std::io::ErrorKind::TimedOut => LlmError::Timeout,
            other => LlmError::Transport(other.to_string()),
        })?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            if matches!(status, 400 | 413) && looks_like_context_overflow(&text) {
                return Err(LlmError::ContextLengthExceeded {
                    prompt_hash: req.prompt_hash(),
                });
            }
            return Err(LlmError::Http { status, body: text });
        }
        let wire: WireResponse =
            serde_json::from_str(&text).map_err(|e| LlmError::MalformedResponse(e.to_string()))?;
        let choice = wire
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| LlmError::MalformedResponse("no choices".into()))?;
        let finish_reason = match choice.finish_reason.as_deref() {
            Some("length") => FinishReason::Length,
            Some("stop") | None => FinishReason::Stop,
            Some(_) => FinishReason::Error,
        };
        Ok(RawCompletion {
            text: choice.text,
            finish_reason,
        })
    }
}
