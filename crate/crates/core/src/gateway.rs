//! Text-completion gateway.
//!
//! The gateway moves strings; it never looks inside them. Three backends sit
//! behind [`CompletionBackend`]: an HTTP backend for a live chat-completions
//! provider, a scripted backend that serves canned responses (the test
//! oracle), and a replay backend keyed by request hash. [`RecordingBackend`]
//! wraps any of them to capture a replay log.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};

use crate::policy::PolicyId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub policy_id: PolicyId,
    pub rendered_prompt: String,
    pub temperature: f64,
    pub max_output_chars: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Live,
    Scripted,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
    pub backend: BackendKind,
    pub latency_ms: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("script exhausted: no entry matches a {0} request")]
    ScriptExhausted(PolicyId),
    #[error("transport error after {retries} retries: {message}")]
    Transport { retries: u32, message: String },
    #[error("no recorded response for request {key}")]
    ReplayMiss { key: String },
    #[error("invalid completion request: {0}")]
    InvalidRequest(String),
}

pub trait CompletionBackend: Send + Sync {
    fn kind(&self) -> BackendKind;
    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError>;
}

/// Front door for every policy call.
#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn CompletionBackend>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("backend", &self.backend.kind())
            .finish()
    }
}

impl Gateway {
    pub fn new(backend: Arc<dyn CompletionBackend>) -> Self {
        Self { backend }
    }

    pub fn scripted(script: Script) -> Self {
        Self::new(Arc::new(ScriptedBackend::new(script)))
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        if request.rendered_prompt.is_empty() {
            return Err(GatewayError::InvalidRequest("rendered prompt is empty".into()));
        }
        if request.max_output_chars == 0 {
            return Err(GatewayError::InvalidRequest("max_output_chars must be positive".into()));
        }
        let started = Instant::now();
        let text = self.backend.complete(request)?;
        Ok(CompletionResponse {
            text,
            backend: self.backend.kind(),
            latency_ms: started.elapsed().as_secs_f64() * 1000.0,
        })
    }
}

// ---------------------------------------------------------------------------
// Scripted backend
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptMatcher {
    pub policy_id: PolicyId,
    /// Substring that must occur in the rendered prompt. Empty matches any.
    #[serde(default)]
    pub contains: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub matcher: ScriptMatcher,
    /// Returned verbatim. Script files may give a JSON object or array
    /// instead of a string; it is stored in compact serialized form.
    #[serde(deserialize_with = "string_or_json")]
    pub response: String,
    #[serde(default)]
    pub consume_once: bool,
}

impl ScriptEntry {
    pub fn new(policy_id: PolicyId, contains: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            matcher: ScriptMatcher {
                policy_id,
                contains: contains.into(),
            },
            response: response.into(),
            consume_once: false,
        }
    }

    pub fn once(mut self) -> Self {
        self.consume_once = true;
        self
    }

    fn matches(&self, request: &CompletionRequest) -> bool {
        self.matcher.policy_id == request.policy_id
            && request.rendered_prompt.contains(&self.matcher.contains)
    }
}

fn string_or_json<'de, D: Deserializer<'de>>(de: D) -> Result<String, D::Error> {
    match serde_json::Value::deserialize(de)? {
        serde_json::Value::String(s) => Ok(s),
        other => Ok(other.to_string()),
    }
}

/// An ordered list of script entries.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Script {
    pub entries: Vec<ScriptEntry>,
}

#[derive(Debug, thiserror::Error)]
pub enum ScriptError {
    #[error("script document is not a JSON list: {0}")]
    NotAList(String),
    #[error("script entry {index} is malformed: {message}")]
    Entry { index: usize, message: String },
    #[error("cannot read script {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Script {
    pub fn new(entries: Vec<ScriptEntry>) -> Self {
        Self { entries }
    }

    pub fn load_str(source: &str) -> Result<Self, ScriptError> {
        let raw: Vec<serde_json::Value> =
            serde_json::from_str(source).map_err(|e| ScriptError::NotAList(e.to_string()))?;
        Self::from_values(raw)
    }

    pub fn from_values(raw: Vec<serde_json::Value>) -> Result<Self, ScriptError> {
        let entries = raw
            .into_iter()
            .enumerate()
            .map(|(index, v)| {
                serde_json::from_value(v).map_err(|e| ScriptError::Entry {
                    index,
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<ScriptEntry>, _>>()?;
        Ok(Self { entries })
    }

    pub fn load_file(path: &Path) -> Result<Self, ScriptError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScriptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::load_str(&text)
    }
}

/// Serves the first matching entry, in declaration order.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    entries: Mutex<Vec<ScriptEntry>>,
}

impl ScriptedBackend {
    pub fn new(script: Script) -> Self {
        Self {
            entries: Mutex::new(script.entries),
        }
    }

    pub fn remaining(&self) -> usize {
        self.entries.lock().expect("script lock poisoned").len()
    }
}

impl CompletionBackend for ScriptedBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Scripted
    }

    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        let mut entries = self.entries.lock().expect("script lock poisoned");
        let idx = entries
            .iter()
            .position(|e| e.matches(request))
            .ok_or(GatewayError::ScriptExhausted(request.policy_id))?;
        if entries[idx].consume_once {
            Ok(entries.remove(idx).response)
        } else {
            Ok(entries[idx].response.clone())
        }
    }
}

// ---------------------------------------------------------------------------
// Replay
// ---------------------------------------------------------------------------

/// Replay key: SHA-256 over the policy id and the rendered prompt. Sampling
/// parameters are deliberately left out.
pub fn request_key(policy_id: PolicyId, rendered_prompt: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(policy_id.as_str().as_bytes());
    hasher.update([0u8]);
    hasher.update(rendered_prompt.as_bytes());
    hex::encode(hasher.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub key: String,
    pub policy_id: PolicyId,
    pub text: String,
}

#[derive(Debug, Default)]
pub struct ReplayBackend {
    records: HashMap<String, String>,
}

impl ReplayBackend {
    pub fn new(records: impl IntoIterator<Item = ReplayRecord>) -> Self {
        Self {
            records: records.into_iter().map(|r| (r.key, r.text)).collect(),
        }
    }

    pub fn load_file(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let records: Vec<ReplayRecord> = serde_json::from_str(&text)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        Ok(Self::new(records))
    }
}

impl CompletionBackend for ReplayBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Replay
    }

    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        let key = request_key(request.policy_id, &request.rendered_prompt);
        self.records
            .get(&key)
            .cloned()
            .ok_or(GatewayError::ReplayMiss { key })
    }
}

/// Passes requests through to `inner` and remembers every successful
/// exchange.
pub struct RecordingBackend {
    inner: Arc<dyn CompletionBackend>,
    log: Mutex<Vec<(CompletionRequest, String)>>,
}

impl RecordingBackend {
    pub fn new(inner: Arc<dyn CompletionBackend>) -> Self {
        Self {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn exchanges(&self) -> Vec<(CompletionRequest, String)> {
        self.log.lock().expect("recorder lock poisoned").clone()
    }

    pub fn replay_records(&self) -> Vec<ReplayRecord> {
        self.exchanges()
            .into_iter()
            .map(|(req, text)| ReplayRecord {
                key: request_key(req.policy_id, &req.rendered_prompt),
                policy_id: req.policy_id,
                text,
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let json = serde_json::to_string_pretty(&self.replay_records())
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        std::fs::write(path, json)
    }
}

impl CompletionBackend for RecordingBackend {
    fn kind(&self) -> BackendKind {
        self.inner.kind()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        let text = self.inner.complete(request)?;
        self.log
            .lock()
            .expect("recorder lock poisoned")
            .push((request.clone(), text.clone()));
        Ok(text)
    }
}

// ---------------------------------------------------------------------------
// Live HTTP backend
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LiveConfig {
    /// Full URL of an OpenAI-compatible `chat/completions` endpoint.
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub retries: u32,
    pub timeout: Duration,
}

impl LiveConfig {
    /// Reads `CONVPLAN_LLM_URL`, `CONVPLAN_LLM_MODEL` and `CONVPLAN_LLM_API_KEY`.
    pub fn from_env() -> Option<Self> {
        let endpoint = std::env::var("CONVPLAN_LLM_URL").ok()?;
        Some(Self {
            endpoint,
            model: std::env::var("CONVPLAN_LLM_MODEL").unwrap_or_else(|_| "default".into()),
            api_key: std::env::var("CONVPLAN_LLM_API_KEY").ok(),
            retries: 2,
            timeout: Duration::from_secs(60),
        })
    }
}

pub struct LiveBackend {
    config: LiveConfig,
    client: reqwest::blocking::Client,
}

impl LiveBackend {
    pub fn new(config: LiveConfig) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| GatewayError::Transport {
                retries: 0,
                message: e.to_string(),
            })?;
        Ok(Self { config, client })
    }

    fn attempt(&self, request: &CompletionRequest) -> Result<String, String> {
        let body = serde_json::json!({
            "model": self.config.model,
            "temperature": request.temperature,
            // rough chars-per-token conversion
            "max_tokens": request.max_output_chars.div_ceil(4),
            "messages": [{"role": "user", "content": request.rendered_prompt}],
        });
        let mut req = self.client.post(&self.config.endpoint).json(&body);
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| e.to_string())?;
        let status = resp.status();
        if !status.is_success() {
            return Err(format!("provider returned {status}"));
        }
        let value: serde_json::Value = resp.json().map_err(|e| e.to_string())?;
        value
            .pointer("/choices/0/message/content")
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .ok_or_else(|| "response has no choices[0].message.content".to_string())
    }
}

impl CompletionBackend for LiveBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Live
    }

    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        let mut last = String::new();
        for attempt in 0..=self.config.retries {
            match self.attempt(request) {
                Ok(text) => return Ok(text),
                Err(e) => {
                    tracing::warn!(attempt, error = %e, "live completion failed");
                    last = e;
                }
            }
        }
        Err(GatewayError::Transport {
            retries: self.config.retries,
            message: last,
        })
    }
}
