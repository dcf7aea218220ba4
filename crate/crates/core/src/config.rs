//! Run configuration as a plain `key = value` file.
//!
//! Blank lines and lines starting with `#` are ignored. Relative paths are
//! resolved against the directory of the file they appear in (or the current
//! directory for command-line overrides). Stop-sequence lists are
//! `|`-separated with `\n`, `\t`, `\|` and `\\` escapes.
//!
//! | key | default |
//! |-----|---------|
//! | `dataset.samples`, `dataset.features` | required for runs |
//! | `seeds` | built-in stage-1 seed examples |
//! | `store` | `plrh-store` |
//! | `n_examples` | `8` |
//! | `example_order` | `ascending` (most similar example last, next to the input) |
//! | `ablation_no_rationale` | `false` |
//! | `head.stage1`, `head.stage2`, `head.stage3`, `head.stage3_ablation` | built-in heads |
//! | `decode.temperature` | `0` |
//! | `decode.rationale.max_new_tokens`, `decode.rationale.stop` | `128`, `===\|\n\n` |
//! | `decode.answer.max_new_tokens`, `decode.answer.stop` | `10`, `\n` |
//! | `backend` | `http`, `scripted`, `echo`, `oracle` or `always_wrong`; default `http` |
//! | `backend.model_id` | `llama-2-7b-chat` |
//! | `backend.url`, `backend.token_env`, `backend.timeout_ms` | `http://127.0.0.1:8080/v1/completions`, unset, `60000` |
//! | `backend.fixture` | scripted-mock fixture file |
//! | `backend.retries`, `backend.retry_backoff_ms` | `3`, `500` |
//! | `concurrency` | `4` |

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use thiserror::Error;

use crate::data_model::Dataset;
use crate::llm_client::{
    AlwaysWrongMock, Backend, EchoMock, HttpBackend, HttpConfig, LlmClient, LlmError, OracleMock,
    RetryPolicy, ScriptedMock,
};
use crate::prompting::{
    DEFAULT_STAGE1_HEAD, DEFAULT_STAGE2_HEAD, DEFAULT_STAGE3_ABLATION_HEAD, DEFAULT_STAGE3_HEAD,
};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Read { path: String, message: String },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {message}")]
    Value { key: String, message: String },
    #[error("conflicting overrides for `{0}`")]
    Conflict(String),
    #[error("`{0}` must be set")]
    Missing(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExampleOrder {
    AscendingSimilarity,
    DescendingSimilarity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heads {
    pub stage1: String,
    pub stage2: String,
    pub stage3: String,
    pub stage3_ablation: String,
}

impl Default for Heads {
    fn default() -> Self {
        Self {
            stage1: DEFAULT_STAGE1_HEAD.into(),
            stage2: DEFAULT_STAGE2_HEAD.into(),
            stage3: DEFAULT_STAGE3_HEAD.into(),
            stage3_ablation: DEFAULT_STAGE3_ABLATION_HEAD.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoding {
    pub max_new_tokens: u32,
    pub stop: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendKind {
    Http,
    Scripted,
    Echo,
    Oracle,
    AlwaysWrong,
}

impl BackendKind {
    fn as_str(&self) -> &'static str {
        match self {
            BackendKind::Http => "http",
            BackendKind::Scripted => "scripted",
            BackendKind::Echo => "echo",
            BackendKind::Oracle => "oracle",
            BackendKind::AlwaysWrong => "always_wrong",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub model_id: String,
    pub url: String,
    pub token_env: Option<String>,
    pub timeout_ms: u64,
    pub fixture: Option<PathBuf>,
    pub retries: u32,
    pub retry_backoff_ms: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Http,
            model_id: "llama-2-7b-chat".into(),
            url: "http://127.0.0.1:8080/v1/completions".into(),
            token_env: None,
            timeout_ms: 60_000,
            fixture: None,
            retries: 3,
            retry_backoff_ms: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub samples: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub seeds: Option<PathBuf>,
    pub store: PathBuf,
    pub n_examples: usize,
    pub example_order: ExampleOrder,
    pub ablation_no_rationale: bool,
    pub heads: Heads,
    pub temperature: f64,
    pub rationale: Decoding,
    pub answer: Decoding,
    pub backend: BackendConfig,
    pub concurrency: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            samples: None,
            features: None,
            seeds: None,
            store: PathBuf::from("plrh-store"),
            n_examples: 8,
            example_order: ExampleOrder::AscendingSimilarity,
            ablation_no_rationale: false,
            heads: Heads::default(),
            temperature: 0.0,
            rationale: Decoding {
                max_new_tokens: 128,
                stop: vec!["===".into(), "\n\n".into()],
            },
            answer: Decoding {
                max_new_tokens: 10,
                stop: vec!["\n".into()],
            },
            backend: BackendConfig::default(),
            concurrency: 4,
        }
    }
}

pub const KEYS: &[&str] = &[
    "dataset.samples",
    "dataset.features",
    "seeds",
    "store",
    "n_examples",
    "example_order",
    "ablation_no_rationale",
    "head.stage1",
    "head.stage2",
    "head.stage3",
    "head.stage3_ablation",
    "decode.temperature",
    "decode.rationale.max_new_tokens",
    "decode.rationale.stop",
    "decode.answer.max_new_tokens",
    "decode.answer.stop",
    "backend",
    "backend.model_id",
    "backend.url",
    "backend.token_env",
    "backend.timeout_ms",
    "backend.fixture",
    "backend.retries",
    "backend.retry_backoff_ms",
    "concurrency",
];

fn escape_stop(s: &str) -> String {
    let mut out = String::new();
    for c in s.chars() {
        match c {
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '|' => out.push_str("\\|"),
            '\\' => out.push_str("\\\\"),
            c => out.push(c),
        }
    }
    out
}

fn parse_stops(key: &str, v: &str) -> Result<Vec<String>, ConfigError> {
    let mut items = vec![String::new()];
    let mut chars = v.chars();
    while let Some(c) = chars.next() {
        match c {
            '|' => items.push(String::new()),
            '\\' => {
                let e = match chars.next() {
                    Some('n') => '\n',
                    Some('t') => '\t',
                    Some('|') => '|',
                    Some('\\') => '\\',
                    other => {
                        return Err(ConfigError::Value {
                            key: key.into(),
                            message: format!("bad escape `\\{}`", other.map(String::from).unwrap_or_default()),
                        })
                    }
                };
                items.last_mut().expect("non-empty").push(e);
            }
            c => items.last_mut().expect("non-empty").push(c),
        }
    }
    items.retain(|s| !s.is_empty());
    Ok(items)
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.into(),
        message: e.to_string(),
    })
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(ConfigError::Value {
            key: key.into(),
            message: "expected true or false".into(),
        }),
    }
}

fn resolve(base: &Path, v: &str) -> PathBuf {
    let p = PathBuf::from(v);
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

impl RunConfig {
    /// Parses a config file; relative paths resolve against its directory.
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            cfg.set(k.trim(), v.trim(), base)?;
        }
        Ok(cfg)
    }

    /// Applies `key=value` overrides. The same key given twice with different
    /// values is a conflict.
    pub fn apply_overrides(&mut self, overrides: &[(String, String)], base: &Path) -> Result<(), ConfigError> {
        let mut seen: std::collections::HashMap<&str, &str> = std::collections::HashMap::new();
        for (k, v) in overrides {
            if let Some(prev) = seen.insert(k, v) {
                if prev != v {
                    return Err(ConfigError::Conflict(k.clone()));
                }
            }
            self.set(k, v, base)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str, base: &Path) -> Result<(), ConfigError> {
        let invalid = |message: &str| ConfigError::Value {
            key: key.into(),
            message: message.into(),
        };
        match key {
            "dataset.samples" => self.samples = Some(resolve(base, v)),
            "dataset.features" => self.features = Some(resolve(base, v)),
            "seeds" => self.seeds = Some(resolve(base, v)),
            "store" => self.store = resolve(base, v),
            "n_examples" => {
                self.n_examples = parse_num(key, v)?;
                if self.n_examples == 0 {
                    return Err(invalid("must be at least 1"));
                }
            }
            "example_order" => {
                self.example_order = match v {
                    "ascending" | "ascending_similarity" => ExampleOrder::AscendingSimilarity,
                    "descending" | "descending_similarity" => ExampleOrder::DescendingSimilarity,
                    _ => return Err(invalid("expected ascending or descending")),
                }
            }
            "ablation_no_rationale" => self.ablation_no_rationale = parse_bool(key, v)?,
            "head.stage1" | "head.stage2" | "head.stage3" | "head.stage3_ablation" => {
                if v.is_empty() {
                    return Err(invalid("head must not be empty"));
                }
                let slot = match key {
                    "head.stage1" => &mut self.heads.stage1,
                    "head.stage2" => &mut self.heads.stage2,
                    "head.stage3" => &mut self.heads.stage3,
                    _ => &mut self.heads.stage3_ablation,
                };
                *slot = v.to_owned();
            }
            "decode.temperature" => {
                self.temperature = parse_num(key, v)?;
                if self.temperature.is_nan() || self.temperature < 0.0 {
                    return Err(invalid("must be non-negative"));
                }
            }
            "decode.rationale.max_new_tokens" | "decode.answer.max_new_tokens" => {
                let n: u32 = parse_num(key, v)?;
                if n == 0 {
                    return Err(invalid("must be positive"));
                }
                if key.contains("rationale") {
                    self.rationale.max_new_tokens = n;
                } else {
                    self.answer.max_new_tokens = n;
                }
            }
            "decode.rationale.stop" => self.rationale.stop = parse_stops(key, v)?,
            "decode.answer.stop" => self.answer.stop = parse_stops(key, v)?,
            "backend" => {
                self.backend.kind = match v {
                    "http" => BackendKind::Http,
                    "scripted" => BackendKind::Scripted,
                    "echo" => BackendKind::Echo,
                    "oracle" => BackendKind::Oracle,
                    "always_wrong" => BackendKind::AlwaysWrong,
                    _ => return Err(invalid("expected http, scripted, echo, oracle or always_wrong")),
                }
            }
            "backend.model_id" => self.backend.model_id = v.to_owned(),
            "backend.url" => self.backend.url = v.to_owned(),
            "backend.token_env" => self.backend.token_env = (!v.is_empty()).then(|| v.to_owned()),
            "backend.timeout_ms" => self.backend.timeout_ms = parse_num(key, v)?,
            "backend.fixture" => self.backend.fixture = Some(resolve(base, v)),
            "backend.retries" => {
                self.backend.retries = parse_num(key, v)?;
                if self.backend.retries == 0 {
                    return Err(invalid("must be at least 1"));
                }
            }
            "backend.retry_backoff_ms" => self.backend.retry_backoff_ms = parse_num(key, v)?,
            "concurrency" => {
                self.concurrency = parse_num(key, v)?;
                if self.concurrency == 0 {
                    return Err(invalid("must be at least 1"));
                }
            }
            _ => return Err(ConfigError::UnknownKey(key.to_owned())),
        }
        Ok(())
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: &str| {
            let _ = writeln!(out, "{k} = {v}");
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        if let Some(p) = path(&self.samples) {
            kv("dataset.samples", &p);
        }
        if let Some(p) = path(&self.features) {
            kv("dataset.features", &p);
        }
        if let Some(p) = path(&self.seeds) {
            kv("seeds", &p);
        }
        kv("store", &self.store.display().to_string());
        kv("n_examples", &self.n_examples.to_string());
        kv(
            "example_order",
            match self.example_order {
                ExampleOrder::AscendingSimilarity => "ascending",
                ExampleOrder::DescendingSimilarity => "descending",
            },
        );
        kv("ablation_no_rationale", &self.ablation_no_rationale.to_string());
        kv("head.stage1", &self.heads.stage1);
        kv("head.stage2", &self.heads.stage2);
        kv("head.stage3", &self.heads.stage3);
        kv("head.stage3_ablation", &self.heads.stage3_ablation);
        kv("decode.temperature", &self.temperature.to_string());
        kv("decode.rationale.max_new_tokens", &self.rationale.max_new_tokens.to_string());
        let stops = |s: &[String]| s.iter().map(|x| escape_stop(x)).collect::<Vec<_>>().join("|");
        kv("decode.rationale.stop", &stops(&self.rationale.stop));
        kv("decode.answer.max_new_tokens", &self.answer.max_new_tokens.to_string());
        kv("decode.answer.stop", &stops(&self.answer.stop));
        kv("backend", self.backend.kind.as_str());
        kv("backend.model_id", &self.backend.model_id);
        kv("backend.url", &self.backend.url);
        if let Some(t) = &self.backend.token_env {
            kv("backend.token_env", t);
        }
        kv("backend.timeout_ms", &self.backend.timeout_ms.to_string());
        if let Some(p) = path(&self.backend.fixture) {
            kv("backend.fixture", &p);
        }
        kv("backend.retries", &self.backend.retries.to_string());
        kv("backend.retry_backoff_ms", &self.backend.retry_backoff_ms.to_string());
        kv("concurrency", &self.concurrency.to_string());
        out
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_attempts: self.backend.retries,
            base_backoff: Duration::from_millis(self.backend.retry_backoff_ms),
        }
    }

    /// Instantiates the configured backend. Oracle-style mocks read `d`.
    pub fn build_client(&self, d: &Dataset) -> Result<LlmClient, LlmError> {
        let model = self.backend.model_id.clone();
        let backend: Box<dyn Backend> = match self.backend.kind {
            BackendKind::Http => Box::new(HttpBackend::new(HttpConfig {
                url: self.backend.url.clone(),
                model_id: model,
                token: self
                    .backend
                    .token_env
                    .as_ref()
                    .and_then(|var| std::env::var(var).ok()),
                timeout: Duration::from_millis(self.backend.timeout_ms),
            })),
            BackendKind::Scripted => {
                let path = self.backend.fixture.as_ref().ok_or_else(|| LlmError::Fixture {
                    path: String::new(),
                    message: "backend.fixture must be set for the scripted backend".into(),
                })?;
                Box::new(ScriptedMock::from_file(model, path)?)
            }
            BackendKind::Echo => Box::new(EchoMock::new(model)),
            BackendKind::Oracle => Box::new(OracleMock::new(model, d)),
            BackendKind::AlwaysWrong => Box::new(AlwaysWrongMock::new(model, d)),
        };
        Ok(LlmClient::new(backend, self.retry_policy()))
    }
}
