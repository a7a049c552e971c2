//! Multimodal model transport: a remote chat-completions client, a scripted
//! client for deterministic runs, JSON extraction and schema repair.

use std::collections::{HashMap, VecDeque};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{ExtractError, RoleFailure, VlmError};

pub const DEFAULT_TEMPERATURE: f64 = 0.2;
pub const DEFAULT_NET_ATTEMPTS: u32 = 3;
pub const DEFAULT_SCHEMA_RETRIES: u32 = 2;
pub const DEFAULT_API_KEY_ENV: &str = "TSCKB_API_KEY";

#[derive(Debug, Clone, PartialEq)]
pub enum Part {
    Text(String),
    Image { media_type: String, bytes: Vec<u8> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct VlmRequest {
    pub parts: Vec<Part>,
    pub temperature: f64,
    pub max_output: u32,
    pub request_tag: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl VlmRequest {
    pub fn new(request_tag: impl Into<String>) -> Self {
        Self {
            parts: Vec::new(),
            temperature: DEFAULT_TEMPERATURE,
            max_output: 4096,
            request_tag: request_tag.into(),
        }
    }

    pub fn text(mut self, text: impl Into<String>) -> Self {
        self.push_text(text);
        self
    }

    pub fn image_png(mut self, bytes: Vec<u8>) -> Self {
        self.parts.push(Part::Image {
            media_type: "image/png".into(),
            bytes,
        });
        self
    }

    /// Appends text, merging with a trailing text part.
    pub fn push_text(&mut self, text: impl Into<String>) {
        let text = text.into();
        if let Some(Part::Text(last)) = self.parts.last_mut() {
            last.push_str(&text);
        } else {
            self.parts.push(Part::Text(text));
        }
    }

    pub fn validate(&self) -> Result<(), VlmError> {
        if !self.parts.iter().any(|p| matches!(p, Part::Text(_))) {
            return Err(VlmError::InvalidRequest("request has no text part".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(VlmError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        Ok(())
    }

    pub fn image_count(&self) -> usize {
        self.parts
            .iter()
            .filter(|p| matches!(p, Part::Image { .. }))
            .count()
    }

    pub fn image_hashes(&self) -> Vec<String> {
        self.parts
            .iter()
            .filter_map(|p| match p {
                Part::Image { bytes, .. } => Some(sha256_hex(bytes)),
                Part::Text(_) => None,
            })
            .collect()
    }

    /// The prompt as text, with each image replaced by a hash marker line.
    pub fn prompt_text(&self) -> String {
        let mut out = String::new();
        for part in &self.parts {
            match part {
                Part::Text(t) => out.push_str(t),
                Part::Image { bytes, .. } => {
                    if !out.is_empty() && !out.ends_with('\n') {
                        out.push('\n');
                    }
                    out.push_str(&format!("<image sha256:{}>\n", sha256_hex(bytes)));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VlmResponse {
    pub raw_text: String,
    pub latency_ms: u64,
    pub attempt: u32,
}

pub trait VlmClient: Send + Sync {
    fn send(&self, request: &VlmRequest) -> Result<VlmResponse, VlmError>;
}

impl<C: VlmClient + ?Sized> VlmClient for &C {
    fn send(&self, request: &VlmRequest) -> Result<VlmResponse, VlmError> {
        (**self).send(request)
    }
}

impl<C: VlmClient + ?Sized> VlmClient for Box<C> {
    fn send(&self, request: &VlmRequest) -> Result<VlmResponse, VlmError> {
        (**self).send(request)
    }
}

/// One line of a script file.
///
/// When `if_prompt_contains` is set, `response` is returned only if the
/// prompt text contains that string; otherwise `else_response` is.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub request_tag: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub if_prompt_contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub else_response: Option<String>,
}

impl ScriptEntry {
    pub fn new(request_tag: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            request_tag: request_tag.into(),
            response: response.into(),
            if_prompt_contains: None,
            else_response: None,
        }
    }

    pub fn conditional(
        request_tag: impl Into<String>,
        needle: impl Into<String>,
        then: impl Into<String>,
        otherwise: impl Into<String>,
    ) -> Self {
        Self {
            request_tag: request_tag.into(),
            response: then.into(),
            if_prompt_contains: Some(needle.into()),
            else_response: Some(otherwise.into()),
        }
    }
}

/// Deterministic client answering from per-tag FIFO queues.
#[derive(Debug, Default)]
pub struct ScriptedClient {
    queues: Mutex<HashMap<String, VecDeque<ScriptEntry>>>,
    issued: Mutex<Vec<String>>,
}

impl ScriptedClient {
    pub fn new(entries: impl IntoIterator<Item = ScriptEntry>) -> Self {
        let mut queues: HashMap<String, VecDeque<ScriptEntry>> = HashMap::new();
        for e in entries {
            queues.entry(e.request_tag.clone()).or_default().push_back(e);
        }
        Self {
            queues: Mutex::new(queues),
            issued: Mutex::new(Vec::new()),
        }
    }

    /// Same queue for every tag.
    pub fn from_responses(tag: &str, responses: &[&str]) -> Self {
        Self::new(responses.iter().map(|r| ScriptEntry::new(tag, *r)))
    }

    pub fn parse_jsonl(text: &str) -> Result<Self, VlmError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ScriptEntry = serde_json::from_str(line)
                .map_err(|e| VlmError::Config(format!("script line {}: {e}", i + 1)))?;
            if entry.if_prompt_contains.is_some() != entry.else_response.is_some() {
                return Err(VlmError::Config(format!(
                    "script line {}: if_prompt_contains and else_response must be given together",
                    i + 1
                )));
            }
            entries.push(entry);
        }
        Ok(Self::new(entries))
    }

    pub fn from_file(path: &Path) -> Result<Self, VlmError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| VlmError::Config(format!("{}: {e}", path.display())))?;
        Self::parse_jsonl(&text)
    }

    /// Request tags in the order they were sent.
    pub fn issued(&self) -> Vec<String> {
        self.issued.lock().expect("lock").clone()
    }

    pub fn remaining(&self) -> usize {
        self.queues.lock().expect("lock").values().map(VecDeque::len).sum()
    }
}

impl VlmClient for ScriptedClient {
    fn send(&self, request: &VlmRequest) -> Result<VlmResponse, VlmError> {
        request.validate()?;
        self.issued
            .lock()
            .expect("lock")
            .push(request.request_tag.clone());
        let entry = self
            .queues
            .lock()
            .expect("lock")
            .get_mut(&request.request_tag)
            .and_then(VecDeque::pop_front)
            .ok_or_else(|| VlmError::ScriptExhausted(request.request_tag.clone()))?;
        let raw_text = match (&entry.if_prompt_contains, entry.else_response) {
            (Some(needle), Some(otherwise)) if !request.prompt_text().contains(needle.as_str()) => {
                otherwise
            }
            _ => entry.response,
        };
        Ok(VlmResponse {
            raw_text,
            latency_ms: 0,
            attempt: 1,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the credential.
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub max_attempts: u32,
    pub backoff_ms: u64,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            model: String::new(),
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            timeout_secs: 120,
            max_attempts: DEFAULT_NET_ATTEMPTS,
            backoff_ms: 500,
        }
    }
}

/// Blocking client for an OpenAI-compatible `/chat/completions` endpoint.
pub struct RemoteClient {
    config: RemoteConfig,
    api_key: String,
    http: reqwest::blocking::Client,
}

impl std::fmt::Debug for RemoteClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteClient")
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl RemoteClient {
    /// Reads the credential from the environment variable named in `config`.
    pub fn from_env(config: RemoteConfig) -> Result<Self, VlmError> {
        let key = std::env::var(&config.api_key_env).map_err(|_| {
            VlmError::Config(format!(
                "environment variable {} is not set",
                config.api_key_env
            ))
        })?;
        Self::with_api_key(config, key)
    }

    pub fn with_api_key(config: RemoteConfig, api_key: String) -> Result<Self, VlmError> {
        if config.model.is_empty() {
            return Err(VlmError::Config("model name is empty".into()));
        }
        if config.max_attempts == 0 {
            return Err(VlmError::Config("max_attempts must be at least 1".into()));
        }
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| VlmError::Config(e.to_string()))?;
        Ok(Self {
            config,
            api_key,
            http,
        })
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    pub fn request_body(&self, request: &VlmRequest) -> Value {
        let engine = base64::engine::general_purpose::STANDARD;
        let content: Vec<Value> = request
            .parts
            .iter()
            .map(|p| match p {
                Part::Text(t) => json!({"type": "text", "text": t}),
                Part::Image { media_type, bytes } => json!({
                    "type": "image_url",
                    "image_url": {"url": format!("data:{media_type};base64,{}", engine.encode(bytes))}
                }),
            })
            .collect();
        json!({
            "model": self.config.model,
            "temperature": request.temperature,
            "max_tokens": request.max_output,
            "messages": [{"role": "user", "content": content}],
        })
    }

    fn backoff(&self, attempt: u32) -> Duration {
        Duration::from_millis(self.config.backoff_ms.saturating_mul(1 << (attempt - 1).min(16)))
    }
}

fn message_text(body: &Value) -> Option<String> {
    let content = body.pointer("/choices/0/message/content")?;
    let text = match content {
        Value::String(s) => s.clone(),
        Value::Array(parts) => parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join(""),
        _ => return None,
    };
    (!text.trim().is_empty()).then_some(text)
}

impl VlmClient for RemoteClient {
    fn send(&self, request: &VlmRequest) -> Result<VlmResponse, VlmError> {
        request.validate()?;
        let body = self.request_body(request);
        let mut last_error = String::new();
        for attempt in 1..=self.config.max_attempts {
            if attempt > 1 {
                std::thread::sleep(self.backoff(attempt - 1));
            }
            let started = Instant::now();
            let result = self
                .http
                .post(self.endpoint())
                .bearer_auth(&self.api_key)
                .json(&body)
                .send();
            let resp = match result {
                Ok(r) => r,
                Err(e) => {
                    log::warn!("{}: attempt {attempt}: {e}", request.request_tag);
                    last_error = e.to_string();
                    continue;
                }
            };
            let status = resp.status();
            let text = resp.text().unwrap_or_default();
            if status.is_success() {
                let parsed: Option<String> = serde_json::from_str::<Value>(&text)
                    .ok()
                    .as_ref()
                    .and_then(message_text);
                match parsed {
                    Some(raw_text) => {
                        return Ok(VlmResponse {
                            raw_text,
                            latency_ms: started.elapsed().as_millis() as u64,
                            attempt,
                        })
                    }
                    None => {
                        last_error = format!("response without message content: {text}");
                        continue;
                    }
                }
            }
            let code = status.as_u16();
            if status.is_client_error() && code != 408 && code != 429 {
                return Err(VlmError::AuthOrQuota {
                    status: code,
                    body: text,
                });
            }
            log::warn!("{}: attempt {attempt}: HTTP {code}", request.request_tag);
            last_error = format!("HTTP {code}: {text}");
        }
        Err(VlmError::Transport {
            attempts: self.config.max_attempts,
            message: last_error,
        })
    }
}

/// One logged round-trip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub request_tag: String,
    pub prompt: String,
    pub image_sha256: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub attempt: u32,
    pub latency_ms: u64,
}

/// Wraps a client and records every send, optionally as JSON lines on disk.
pub struct RecordingClient<C> {
    inner: C,
    sink: Option<Mutex<File>>,
    records: Mutex<Vec<TranscriptRecord>>,
}

impl<C: VlmClient> RecordingClient<C> {
    pub fn new(inner: C) -> Self {
        Self {
            inner,
            sink: None,
            records: Mutex::new(Vec::new()),
        }
    }

    /// Appends records to `path`, creating it if needed.
    pub fn with_file(inner: C, path: &Path) -> std::io::Result<Self> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        Ok(Self {
            inner,
            sink: Some(Mutex::new(file)),
            records: Mutex::new(Vec::new()),
        })
    }

    pub fn records(&self) -> Vec<TranscriptRecord> {
        self.records.lock().expect("lock").clone()
    }

    pub fn tags(&self) -> Vec<String> {
        self.records
            .lock()
            .expect("lock")
            .iter()
            .map(|r| r.request_tag.clone())
            .collect()
    }

    pub fn into_inner(self) -> C {
        self.inner
    }
}

impl<C: VlmClient> VlmClient for RecordingClient<C> {
    fn send(&self, request: &VlmRequest) -> Result<VlmResponse, VlmError> {
        let result = self.inner.send(request);
        let record = TranscriptRecord {
            request_tag: request.request_tag.clone(),
            prompt: request.prompt_text(),
            image_sha256: request.image_hashes(),
            raw_response: result.as_ref().ok().map(|r| r.raw_text.clone()),
            error: result.as_ref().err().map(ToString::to_string),
            attempt: result.as_ref().map_or(0, |r| r.attempt),
            latency_ms: result.as_ref().map_or(0, |r| r.latency_ms),
        };
        if let Some(sink) = &self.sink {
            let line = serde_json::to_string(&record).expect("record serializes");
            let mut file = sink.lock().expect("lock");
            if let Err(e) = writeln!(file, "{line}") {
                log::error!("transcript write failed: {e}");
            }
        }
        self.records.lock().expect("lock").push(record);
        result
    }
}

pub fn read_transcript(path: &Path) -> std::io::Result<Vec<TranscriptRecord>> {
    let file = File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?,
        );
    }
    Ok(out)
}

/// End index (exclusive) of the balanced object starting at `start`.
fn balanced_end(bytes: &[u8], start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            match (escaped, b) {
                (true, _) => escaped = false,
                (false, b'\\') => escaped = true,
                (false, b'"') => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

/// First balanced `{...}` in `raw_text` that parses as a JSON object, with
/// `required_keys` checked on it. Prose and code fences around it are ignored.
pub fn extract_json(raw_text: &str, required_keys: &[&str]) -> Result<Map<String, Value>, ExtractError> {
    let bytes = raw_text.as_bytes();
    let mut from = 0;
    while let Some(offset) = raw_text[from..].find('{') {
        let start = from + offset;
        if let Some(end) = balanced_end(bytes, start) {
            if let Ok(Value::Object(map)) = serde_json::from_str::<Value>(&raw_text[start..end]) {
                if let Some(missing) = required_keys.iter().find(|k| !map.contains_key(**k)) {
                    return Err(ExtractError::Schema(format!("missing key {missing:?}")));
                }
                return Ok(map);
            }
        }
        from = start + 1;
    }
    Err(ExtractError::MalformedOutput)
}

pub fn repair_instruction(required_keys: &[&str], error: &ExtractError) -> String {
    format!(
        "\n\nYour previous reply was not valid JSON with keys {} ({error}); reply with JSON only.",
        required_keys.join(", ")
    )
}

/// Sends `request`, extracts JSON and runs `validate`; on extraction or
/// validation failure appends a repair instruction and retries up to
/// `r_schema` times. Returns the validated value and all raw replies.
pub fn call_with_repair<T>(
    client: &dyn VlmClient,
    request: &VlmRequest,
    required_keys: &[&str],
    r_schema: u32,
    role: &str,
    mut validate: impl FnMut(&Map<String, Value>) -> Result<T, ExtractError>,
) -> Result<(T, Vec<String>), RoleFailure> {
    let mut transcripts = Vec::new();
    let mut current = request.clone();
    let mut last_error = ExtractError::MalformedOutput;
    for attempt in 0..=r_schema {
        if attempt > 0 {
            current.push_text(repair_instruction(required_keys, &last_error));
        }
        let response = match client.send(&current) {
            Ok(r) => r,
            Err(source) => {
                return Err(RoleFailure::Transport {
                    role: role.into(),
                    source,
                    transcripts,
                })
            }
        };
        let outcome = extract_json(&response.raw_text, required_keys).and_then(|doc| validate(&doc));
        transcripts.push(response.raw_text);
        match outcome {
            Ok(value) => return Ok((value, transcripts)),
            Err(e) => {
                log::warn!("{role}: attempt {}: {e}", attempt + 1);
                last_error = e;
            }
        }
    }
    Err(RoleFailure::Unparseable {
        role: role.into(),
        attempts: r_schema + 1,
        last_error,
        transcripts,
    })
}
