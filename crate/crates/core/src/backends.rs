//! Model backends: an embedder turns an image into a vector, a generator turns
//! images plus a prompt into text.
//!
//! Real backends speak the OpenAI-compatible HTTP protocol:
//! `POST {endpoint}/chat/completions` with one user message whose content
//! lists the image parts first and the text part last, and
//! `POST {endpoint}/embeddings` with a single `image_url` input. Local image
//! paths are inlined as base64 data URIs.
//!
//! Mocks run in-process, record every request and are deterministic.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::path::Path;
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rng::SeededRng;

pub const DEFAULT_TIMEOUT_SECS: f64 = 60.0;
pub const DEFAULT_RETRY: u32 = 2;
pub const DEFAULT_BACKOFF_MS: u64 = 250;
pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport failure after {attempts} attempt(s) in {elapsed:?}: {message}")]
    Transport {
        attempts: u32,
        elapsed: Duration,
        message: String,
    },
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    Protocol(String),
    #[error("backend returned an empty response")]
    EmptyResponse,
    #[error("mock script exhausted after {calls} call(s)")]
    ScriptExhausted { calls: usize },
    #[error("profile is a {found} backend, expected {expected}")]
    WrongKind {
        expected: BackendKind,
        found: BackendKind,
    },
    #[error("embedding has dimension {found}, expected {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid profile: {0}")]
    Config(String),
    #[error("image `{uri}`: {message}")]
    Image { uri: String, message: String },
}

impl BackendError {
    /// True for failures of the connection itself, as opposed to a response
    /// the server chose to send.
    pub fn is_transport(&self) -> bool {
        matches!(self, BackendError::Transport { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Embedder,
    Generator,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Embedder => "embedder",
            BackendKind::Generator => "generator",
        })
    }
}

/// An image handed to a backend.
#[derive(Debug, Clone, PartialEq)]
pub enum ImagePayload {
    /// Local path, `http(s)://` URL or `data:` URI.
    Uri(String),
    Inline {
        bytes: Vec<u8>,
        mime: String,
    },
}

fn mime_for(path: &str) -> &'static str {
    let ext = Path::new(path)
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("png") => "image/png",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        Some("bmp") => "image/bmp",
        _ => "image/jpeg",
    }
}

fn data_uri(bytes: &[u8], mime: &str) -> String {
    format!(
        "data:{mime};base64,{}",
        base64::engine::general_purpose::STANDARD.encode(bytes)
    )
}

impl ImagePayload {
    pub fn uri(uri: impl Into<String>) -> Self {
        ImagePayload::Uri(uri.into())
    }

    /// URL for an `image_url` content part. Remote and data URIs pass through;
    /// local files are read and inlined.
    pub fn to_url(&self) -> Result<String, BackendError> {
        match self {
            ImagePayload::Inline { bytes, mime } => Ok(data_uri(bytes, mime)),
            ImagePayload::Uri(u)
                if u.starts_with("http://")
                    || u.starts_with("https://")
                    || u.starts_with("data:") =>
            {
                Ok(u.clone())
            }
            ImagePayload::Uri(u) => {
                let path = u.strip_prefix("file://").unwrap_or(u);
                let bytes = std::fs::read(path).map_err(|e| BackendError::Image {
                    uri: u.clone(),
                    message: e.to_string(),
                })?;
                Ok(data_uri(&bytes, mime_for(path)))
            }
        }
    }

    /// Content bytes: file contents for readable local paths, otherwise the
    /// URI text itself.
    pub fn content_bytes(&self) -> Vec<u8> {
        match self {
            ImagePayload::Inline { bytes, .. } => bytes.clone(),
            ImagePayload::Uri(u) => {
                let path = u.strip_prefix("file://").unwrap_or(u);
                std::fs::read(path).unwrap_or_else(|_| u.as_bytes().to_vec())
            }
        }
    }

    pub fn describe(&self) -> String {
        match self {
            ImagePayload::Uri(u) => u.clone(),
            ImagePayload::Inline { bytes, mime } => format!("<{mime}, {} bytes>", bytes.len()),
        }
    }
}

/// One text-generation call.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    /// Images in the order they precede the prompt.
    pub images: Vec<ImagePayload>,
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub seed: Option<u64>,
    /// Caller metadata (label, cluster, test id...). Never sent over the
    /// wire; mocks may read it.
    pub tags: BTreeMap<String, String>,
}

impl GenerationRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        Self {
            images: Vec::new(),
            prompt: prompt.into(),
            max_tokens: 16,
            temperature: 0.0,
            seed: None,
            tags: BTreeMap::new(),
        }
    }

    pub fn with_images(mut self, images: Vec<ImagePayload>) -> Self {
        self.images = images;
        self
    }

    pub fn with_decoding(mut self, max_tokens: u32, temperature: f64) -> Self {
        self.max_tokens = max_tokens;
        self.temperature = temperature;
        self
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self
    }

    pub fn tag(mut self, key: &str, value: impl Into<String>) -> Self {
        self.tags.insert(key.to_string(), value.into());
        self
    }
}

pub trait Generator: Send + Sync {
    fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError>;

    /// Identity string used in cache keys; changes whenever outputs could.
    fn tag(&self) -> String;
}

pub trait Embedder: Send + Sync {
    fn embed(&self, image: &ImagePayload) -> Result<Vec<f32>, BackendError>;

    fn tag(&self) -> String;
}

fn default_timeout() -> f64 {
    DEFAULT_TIMEOUT_SECS
}
fn default_retry() -> u32 {
    DEFAULT_RETRY
}
fn default_backoff() -> u64 {
    DEFAULT_BACKOFF_MS
}
fn default_in_flight() -> usize {
    DEFAULT_MAX_IN_FLIGHT
}

/// Where and how to reach one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendProfile {
    pub kind: BackendKind,
    /// Base URL, e.g. `http://localhost:8000/v1`.
    #[serde(default)]
    pub endpoint: String,
    #[serde(default)]
    pub model_name: String,
    /// Environment variable holding a bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retry")]
    pub retry: u32,
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    /// Use an in-process mock instead of the endpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock: Option<MockSpec>,
}

impl BackendProfile {
    pub fn http(
        kind: BackendKind,
        endpoint: impl Into<String>,
        model_name: impl Into<String>,
    ) -> Self {
        Self {
            kind,
            endpoint: endpoint.into(),
            model_name: model_name.into(),
            auth_env: None,
            timeout_secs: DEFAULT_TIMEOUT_SECS,
            retry: DEFAULT_RETRY,
            backoff_ms: DEFAULT_BACKOFF_MS,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            max_tokens: None,
            temperature: None,
            mock: None,
        }
    }

    pub fn mock(kind: BackendKind, spec: MockSpec) -> Self {
        Self {
            mock: Some(spec),
            ..Self::http(kind, "", "")
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(BackendError::Config("timeout must be positive".into()));
        }
        if self.max_in_flight == 0 {
            return Err(BackendError::Config(
                "max_in_flight must be at least 1".into(),
            ));
        }
        if self.mock.is_none() && self.endpoint.is_empty() {
            return Err(BackendError::Config("endpoint is required".into()));
        }
        if let Some(t) = self.temperature {
            if t < 0.0 {
                return Err(BackendError::Config("temperature must be >= 0".into()));
            }
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }

    fn expect_kind(&self, expected: BackendKind) -> Result<(), BackendError> {
        if self.kind == expected {
            Ok(())
        } else {
            Err(BackendError::WrongKind {
                expected,
                found: self.kind,
            })
        }
    }
}

/// Counting semaphore bounding concurrent requests per profile.
#[derive(Debug)]
struct InFlight {
    max: usize,
    current: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn new(max: usize) -> Self {
        Self {
            max: max.max(1),
            current: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.current.lock().expect("in-flight lock");
        while *n >= self.max {
            n = self.freed.wait(n).expect("in-flight lock");
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.current.lock().expect("in-flight lock");
        *n -= 1;
        self.0.freed.notify_one();
    }
}

enum Attempt<T> {
    Done(T),
    /// Connection-level failure; retried.
    Transport(String),
    Fatal(BackendError),
}

/// Runs `op` up to `retry + 1` times, retrying only transport failures, with
/// backoff `backoff * 2^attempt` between tries.
fn with_retry<T>(
    retry: u32,
    backoff: Duration,
    mut op: impl FnMut() -> Attempt<T>,
) -> Result<T, BackendError> {
    let start = Instant::now();
    let mut attempts = 0;
    loop {
        attempts += 1;
        match op() {
            Attempt::Done(v) => return Ok(v),
            Attempt::Fatal(e) => return Err(e),
            Attempt::Transport(message) => {
                if attempts > retry {
                    return Err(BackendError::Transport {
                        attempts,
                        elapsed: start.elapsed(),
                        message,
                    });
                }
                log::warn!("transport failure (attempt {attempts}): {message}; retrying");
                thread::sleep(backoff * 2u32.saturating_pow(attempts - 1));
            }
        }
    }
}

struct HttpCore {
    profile: BackendProfile,
    client: reqwest::blocking::Client,
    token: Option<String>,
    limiter: InFlight,
}

impl HttpCore {
    fn new(profile: BackendProfile) -> Result<Self, BackendError> {
        profile.validate()?;
        let token = match &profile.auth_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                BackendError::Config(format!("auth environment variable `{var}` is not set"))
            })?),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(profile.timeout())
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(Self {
            limiter: InFlight::new(profile.max_in_flight),
            profile,
            client,
            token,
        })
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{path}", self.profile.endpoint.trim_end_matches('/'))
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, BackendError> {
        let _permit = self.limiter.acquire();
        let url = self.url(path);
        with_retry(
            self.profile.retry,
            Duration::from_millis(self.profile.backoff_ms),
            || {
                let mut req = self.client.post(&url).json(body);
                if let Some(t) = &self.token {
                    req = req.bearer_auth(t);
                }
                let resp = match req.send() {
                    Ok(r) => r,
                    Err(e) => return Attempt::Transport(e.to_string()),
                };
                let status = resp.status();
                let text = match resp.text() {
                    Ok(t) => t,
                    Err(e) => return Attempt::Transport(e.to_string()),
                };
                if !status.is_success() {
                    return Attempt::Fatal(BackendError::Http {
                        status: status.as_u16(),
                        body: text,
                    });
                }
                match serde_json::from_str(&text) {
                    Ok(v) => Attempt::Done(v),
                    Err(e) => Attempt::Fatal(BackendError::Protocol(e.to_string())),
                }
            },
        )
    }
}

/// Chat-completions generator.
pub struct HttpGenerator {
    core: HttpCore,
}

impl HttpGenerator {
    pub fn new(profile: BackendProfile) -> Result<Self, BackendError> {
        profile.expect_kind(BackendKind::Generator)?;
        Ok(Self {
            core: HttpCore::new(profile)?,
        })
    }

    /// Request body for `request`: image parts first, then the text part.
    pub fn payload(&self, request: &GenerationRequest) -> Result<Value, BackendError> {
        chat_payload(&self.core.profile.model_name, request)
    }
}

pub fn chat_payload(model: &str, request: &GenerationRequest) -> Result<Value, BackendError> {
    let mut content = Vec::with_capacity(request.images.len() + 1);
    for image in &request.images {
        content.push(json!({"type": "image_url", "image_url": {"url": image.to_url()?}}));
    }
    content.push(json!({"type": "text", "text": request.prompt}));
    let mut body = json!({
        "model": model,
        "messages": [{"role": "user", "content": content}],
        "max_tokens": request.max_tokens,
        "temperature": request.temperature,
    });
    if let Some(seed) = request.seed {
        body["seed"] = json!(seed);
    }
    Ok(body)
}

fn completion_text(v: &Value) -> Result<String, BackendError> {
    let content = v
        .pointer("/choices/0/message/content")
        .ok_or_else(|| BackendError::Protocol("missing choices[0].message.content".into()))?;
    let text = match content {
        Value::String(s) => s.clone(),
        Value::Array(parts) => parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join(""),
        Value::Null => String::new(),
        other => {
            return Err(BackendError::Protocol(format!(
                "unexpected content {other}"
            )))
        }
    };
    if text.trim().is_empty() {
        return Err(BackendError::EmptyResponse);
    }
    Ok(text)
}

impl Generator for HttpGenerator {
    fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        if request.prompt.is_empty() {
            return Err(BackendError::Config("prompt must not be empty".into()));
        }
        let body = self.payload(request)?;
        completion_text(&self.core.post("chat/completions", &body)?)
    }

    fn tag(&self) -> String {
        format!(
            "openai:{}@{}",
            self.core.profile.model_name, self.core.profile.endpoint
        )
    }
}

/// Image embedder over `POST {endpoint}/embeddings`.
pub struct HttpEmbedder {
    core: HttpCore,
}

impl HttpEmbedder {
    pub fn new(profile: BackendProfile) -> Result<Self, BackendError> {
        profile.expect_kind(BackendKind::Embedder)?;
        Ok(Self {
            core: HttpCore::new(profile)?,
        })
    }
}

impl Embedder for HttpEmbedder {
    fn embed(&self, image: &ImagePayload) -> Result<Vec<f32>, BackendError> {
        let body = json!({
            "model": self.core.profile.model_name,
            "input": [{"type": "image_url", "image_url": {"url": image.to_url()?}}],
            "encoding_format": "float",
        });
        let v = self.core.post("embeddings", &body)?;
        let arr = v
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| BackendError::Protocol("missing data[0].embedding".into()))?;
        arr.iter()
            .map(|x| {
                x.as_f64()
                    .map(|f| f as f32)
                    .ok_or_else(|| BackendError::Protocol("non-numeric embedding value".into()))
            })
            .collect()
    }

    fn tag(&self) -> String {
        format!(
            "openai-embed:{}@{}",
            self.core.profile.model_name, self.core.profile.endpoint
        )
    }
}

/// Declarative mock behaviour, usable from run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MockSpec {
    /// Answers in order; one more call than answers fails.
    Script {
        answers: Vec<String>,
    },
    Constant {
        text: String,
    },
    /// `on_match` when the prompt contains `marker`, else `otherwise`.
    Keyword {
        marker: String,
        #[serde(default = "yes")]
        on_match: String,
        #[serde(default = "no")]
        otherwise: String,
    },
    /// Fills `{n_images}` and `{<tag>}` placeholders from the request.
    Template {
        template: String,
    },
    /// Answers correctly iff the prompt carries the marker for the gold
    /// label (`{label}` in `marker` is substituted); otherwise wrongly.
    MarkerOracle {
        #[serde(default = "default_marker")]
        marker: String,
    },
    /// Content-hash embedder of the given dimension.
    HashEmbedder {
        dim: usize,
    },
}

fn yes() -> String {
    "Yes".into()
}
fn no() -> String {
    "No".into()
}
fn default_marker() -> String {
    "<<{label}>>".into()
}

type Rule = Arc<dyn Fn(&GenerationRequest) -> String + Send + Sync>;

enum Behavior {
    Script(Mutex<VecDeque<String>>),
    Rule(Rule),
}

/// In-process generator that logs every request.
pub struct MockGenerator {
    name: String,
    behavior: Behavior,
    log: Mutex<Vec<GenerationRequest>>,
}

impl MockGenerator {
    pub fn scripted(answers: impl IntoIterator<Item = impl Into<String>>) -> Self {
        let answers: VecDeque<String> = answers.into_iter().map(Into::into).collect();
        Self {
            name: "script".into(),
            behavior: Behavior::Script(Mutex::new(answers)),
            log: Mutex::new(Vec::new()),
        }
    }

    /// A pure function of the request. `name` goes into [`Generator::tag`].
    pub fn rule(
        name: impl Into<String>,
        f: impl Fn(&GenerationRequest) -> String + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            behavior: Behavior::Rule(Arc::new(f)),
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn constant(text: impl Into<String>) -> Self {
        let text = text.into();
        Self::rule(format!("constant:{text}"), move |_| text.clone())
    }

    pub fn keyword(
        marker: impl Into<String>,
        on_match: impl Into<String>,
        otherwise: impl Into<String>,
    ) -> Self {
        let (marker, on_match, otherwise) = (marker.into(), on_match.into(), otherwise.into());
        Self::rule(format!("keyword:{marker}"), move |r| {
            if r.prompt.contains(&marker) {
                on_match.clone()
            } else {
                otherwise.clone()
            }
        })
    }

    pub fn template(template: impl Into<String>) -> Self {
        let template = template.into();
        Self::rule(format!("template:{template}"), move |r| {
            let mut out = template.replace("{n_images}", &r.images.len().to_string());
            for (k, v) in &r.tags {
                out = out.replace(&format!("{{{k}}}"), v);
            }
            out
        })
    }

    /// See [`MockSpec::MarkerOracle`]. Reads the `task`, `test_id`, `label`
    /// and `labels` request tags set by the classifier.
    pub fn marker_oracle(
        marker: impl Into<String>,
        gold: BTreeMap<String, BTreeSet<String>>,
    ) -> Self {
        let marker = marker.into();
        Self::rule(format!("marker_oracle:{marker}"), move |r| {
            let mark = |label: &str| marker.replace("{label}", label);
            let test_id = r.tags.get("test_id").map(String::as_str).unwrap_or("");
            let empty = BTreeSet::new();
            let gold_labels = gold.get(test_id).unwrap_or(&empty);
            match r.tags.get("task").map(String::as_str) {
                Some("binary") => {
                    let label = r.tags.get("label").map(String::as_str).unwrap_or("");
                    let truth = gold_labels.contains(label);
                    let answer = if r.prompt.contains(&mark(label)) {
                        truth
                    } else {
                        !truth
                    };
                    if answer { "Yes" } else { "No" }.to_string()
                }
                Some("multiclass") => {
                    let labels: Vec<&str> = r
                        .tags
                        .get("labels")
                        .map(|s| s.split('\n').collect())
                        .unwrap_or_default();
                    let gold_label = gold_labels.iter().next().map(String::as_str).unwrap_or("");
                    if r.prompt.contains(&mark(gold_label)) {
                        gold_label.to_string()
                    } else {
                        labels
                            .iter()
                            .find(|l| **l != gold_label)
                            .map(|l| l.to_string())
                            .unwrap_or_else(|| "unknown".into())
                    }
                }
                _ => "unknown".into(),
            }
        })
    }

    /// Every request seen so far, in call order.
    pub fn requests(&self) -> Vec<GenerationRequest> {
        self.log.lock().expect("mock log").clone()
    }

    pub fn call_count(&self) -> usize {
        self.log.lock().expect("mock log").len()
    }
}

impl Generator for MockGenerator {
    fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        let calls = {
            let mut log = self.log.lock().expect("mock log");
            log.push(request.clone());
            log.len()
        };
        let text = match &self.behavior {
            Behavior::Script(queue) => queue
                .lock()
                .expect("mock script")
                .pop_front()
                .ok_or(BackendError::ScriptExhausted { calls: calls - 1 })?,
            Behavior::Rule(f) => f(request),
        };
        if text.trim().is_empty() {
            return Err(BackendError::EmptyResponse);
        }
        Ok(text)
    }

    fn tag(&self) -> String {
        format!("mock:{}", self.name)
    }
}

/// Deterministic embedder: SHA-256 of the image content seeds a generator
/// that draws `dim` uniform values in `[-1, 1)`, then the vector is normalized.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl Embedder for HashEmbedder {
    fn embed(&self, image: &ImagePayload) -> Result<Vec<f32>, BackendError> {
        let digest = Sha256::digest(image.content_bytes());
        let mut seed_bytes = [0u8; 8];
        seed_bytes.copy_from_slice(&digest[..8]);
        let mut rng = SeededRng::new(u64::from_le_bytes(seed_bytes));
        let raw: Vec<f64> = (0..self.dim).map(|_| rng.next_f64() * 2.0 - 1.0).collect();
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        Ok(raw.iter().map(|x| (x / norm) as f32).collect())
    }

    fn tag(&self) -> String {
        format!("mock:hash:{}", self.dim)
    }
}

/// Gold label sets per test id, consumed by [`MockSpec::MarkerOracle`].
pub type GoldLabels = BTreeMap<String, BTreeSet<String>>;

/// Instantiates the mock generator described by `spec`.
pub fn mock_registry(
    spec: &MockSpec,
    gold: Option<&GoldLabels>,
) -> Result<MockGenerator, BackendError> {
    Ok(match spec {
        MockSpec::Script { answers } => MockGenerator::scripted(answers.clone()),
        MockSpec::Constant { text } => MockGenerator::constant(text.clone()),
        MockSpec::Keyword {
            marker,
            on_match,
            otherwise,
        } => MockGenerator::keyword(marker.clone(), on_match.clone(), otherwise.clone()),
        MockSpec::Template { template } => MockGenerator::template(template.clone()),
        MockSpec::MarkerOracle { marker } => {
            MockGenerator::marker_oracle(marker.clone(), gold.cloned().unwrap_or_default())
        }
        MockSpec::HashEmbedder { .. } => {
            return Err(BackendError::Config(
                "hash_embedder is not a generator".into(),
            ))
        }
    })
}

pub fn build_generator(
    profile: &BackendProfile,
    gold: Option<&GoldLabels>,
) -> Result<Arc<dyn Generator>, BackendError> {
    profile.validate()?;
    profile.expect_kind(BackendKind::Generator)?;
    match &profile.mock {
        Some(spec) => Ok(Arc::new(mock_registry(spec, gold)?)),
        None => Ok(Arc::new(HttpGenerator::new(profile.clone())?)),
    }
}

pub fn build_embedder(profile: &BackendProfile) -> Result<Arc<dyn Embedder>, BackendError> {
    profile.validate()?;
    profile.expect_kind(BackendKind::Embedder)?;
    match &profile.mock {
        Some(MockSpec::HashEmbedder { dim }) => Ok(Arc::new(HashEmbedder::new(*dim))),
        Some(_) => Err(BackendError::Config("only hash_embedder can embed".into())),
        None => Ok(Arc::new(HttpEmbedder::new(profile.clone())?)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn script_runs_out() {
        let m = MockGenerator::scripted(["a", "b", "c"]);
        let req = GenerationRequest::new("p");
        for want in ["a", "b", "c"] {
            assert_eq!(m.generate(&req).unwrap(), want);
        }
        assert!(matches!(
            m.generate(&req),
            Err(BackendError::ScriptExhausted { calls: 3 })
        ));
        assert_eq!(m.call_count(), 4);
    }

    #[test]
    fn keyword_rule_is_pure() {
        let m = MockGenerator::keyword("[[X]]", "Yes", "No");
        let hit = GenerationRequest::new("foo [[X]] bar");
        let miss = GenerationRequest::new("foo bar");
        assert_eq!(m.generate(&hit).unwrap(), "Yes");
        assert_eq!(m.generate(&miss).unwrap(), "No");
        assert_eq!(m.generate(&hit).unwrap(), "Yes");
        assert_eq!(m.requests().len(), 3);
    }

    #[test]
    fn template_fills_tags() {
        let m = MockGenerator::template("DESC({label},{n_images})");
        let req = GenerationRequest::new("p")
            .with_images(vec![ImagePayload::uri("a"); 4])
            .tag("label", "awe");
        assert_eq!(m.generate(&req).unwrap(), "DESC(awe,4)");
    }

    #[test]
    fn hash_embedder_is_deterministic_and_unit() {
        let e = HashEmbedder::new(16);
        let a = ImagePayload::Inline {
            bytes: b"abc".to_vec(),
            mime: "image/png".into(),
        };
        let v1 = e.embed(&a).unwrap();
        let v2 = e.embed(&a).unwrap();
        assert_eq!(v1, v2);
        let norm: f32 = v1.iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
    }

    #[test]
    fn image_parts_precede_text() {
        let req = GenerationRequest::new("question").with_images(vec![
            ImagePayload::uri("https://x/1.png"),
            ImagePayload::uri("https://x/2.png"),
        ]);
        let body = chat_payload("m", &req).unwrap();
        let content = body["messages"][0]["content"].as_array().unwrap();
        let kinds: Vec<&str> = content
            .iter()
            .map(|p| p["type"].as_str().unwrap())
            .collect();
        assert_eq!(kinds, ["image_url", "image_url", "text"]);
        assert_eq!(content[2]["text"], "question");
        assert!(body.get("seed").is_none());
    }

    #[test]
    fn profile_validation() {
        let mut p = BackendProfile::http(BackendKind::Generator, "http://x", "m");
        assert!(p.validate().is_ok());
        p.timeout_secs = 0.0;
        assert!(matches!(p.validate(), Err(BackendError::Config(_))));
        let p = BackendProfile::http(BackendKind::Embedder, "http://x", "m");
        assert!(matches!(
            HttpGenerator::new(p),
            Err(BackendError::WrongKind {
                expected: BackendKind::Generator,
                ..
            })
        ));
    }

    #[test]
    fn in_flight_limit_blocks() {
        let lim = Arc::new(InFlight::new(2));
        let peak = Arc::new(Mutex::new((0usize, 0usize)));
        thread::scope(|s| {
            for _ in 0..6 {
                let lim = lim.clone();
                let peak = peak.clone();
                s.spawn(move || {
                    let _p = lim.acquire();
                    {
                        let mut g = peak.lock().unwrap();
                        g.0 += 1;
                        g.1 = g.1.max(g.0);
                    }
                    thread::sleep(Duration::from_millis(20));
                    peak.lock().unwrap().0 -= 1;
                });
            }
        });
        assert_eq!(peak.lock().unwrap().1, 2);
    }
}
