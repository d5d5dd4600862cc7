//! Provider layer: chat and embedding traits, deterministic mock
//! implementations for tests and offline runs, an HTTP client for real
//! providers, retry/backoff policy, and the two-stage planner that turns a
//! query (plus optional experiential prior) into a decision.
//!
//! Everything above this module talks to traits; swapping the mock chat for
//! the HTTP one changes no behavior besides who answers.

use std::collections::VecDeque;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::executor::{extract_json_values, run_tool_loop, SolverRequest, ToolEnvironment, ToolLoopError};
use crate::mapping::normalize_strategy;
use crate::memory::ExperientialPrior;
use crate::trace::TraceLog;
use crate::types::{
    Decision, Query, RawStrategy, TaskMatrix, Template, TraceStage, ValidationError,
};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    /// Network/transport trouble; worth retrying.
    #[error("transport: {0}")]
    Transport(String),
    /// Provider said to slow down; worth retrying after a delay.
    #[error("rate limited")]
    RateLimited { retry_after_ms: Option<u64> },
    /// Credentials rejected; retrying cannot help.
    #[error("auth: {0}")]
    Auth(String),
    /// The provider answered, but not in a usable shape.
    #[error("malformed reply: {0}")]
    Malformed(String),
}

impl BackendError {
    /// Whether a retry could plausibly succeed.
    pub fn is_transient(&self) -> bool {
        matches!(self, BackendError::Transport(_) | BackendError::RateLimited { .. })
    }

    pub fn class(&self) -> &'static str {
        match self {
            BackendError::Transport(_) => "transport",
            BackendError::RateLimited { .. } => "rate_limited",
            BackendError::Auth(_) => "auth",
            BackendError::Malformed(_) => "malformed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Assistant,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

/// One chat call: system prompt, at least one message, and an opaque sampling
/// object passed through to the provider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system: String,
    pub messages: Vec<ChatMessage>,
    #[serde(default)]
    pub sampling: Value,
}

impl ChatRequest {
    pub fn new(
        system: impl Into<String>,
        messages: Vec<ChatMessage>,
        sampling: Value,
    ) -> Result<Self, ValidationError> {
        if messages.is_empty() {
            return Err(ValidationError::EmptyQuery);
        }
        Ok(ChatRequest { system: system.into(), messages, sampling })
    }

    /// System prompt plus a single user message.
    pub fn user(system: impl Into<String>, text: impl Into<String>) -> Self {
        ChatRequest {
            system: system.into(),
            messages: vec![ChatMessage { role: Role::User, content: text.into() }],
            sampling: Value::Null,
        }
    }

    pub fn push(&mut self, role: Role, content: impl Into<String>) {
        self.messages.push(ChatMessage { role, content: content.into() });
    }
}

pub trait ChatBackend: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<String, BackendError>;

    fn name(&self) -> &str {
        "chat"
    }
}

pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<Vec<f32>, BackendError>;

    fn dimension(&self) -> usize;

    fn name(&self) -> &str {
        "embedder"
    }
}

/// Batch solving: one call takes a batch's prompts and returns raw text the
/// executor will parse into rows.
pub trait BatchSolver: Send + Sync {
    fn solve_batch(&self, request: &SolverRequest) -> Result<String, BackendError>;
}

/// Planning: query plus scouting observations (and an optional prior) to a
/// full decision.
pub trait Planner: Send + Sync {
    fn plan(
        &self,
        query: &Query,
        observations: &[String],
        prior: Option<&ExperientialPrior>,
    ) -> Result<Decision, PlanError>;
}

#[derive(Debug, thiserror::Error)]
pub enum PlanError {
    #[error("plan JSON unusable after repair: {0}")]
    Unparseable(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Scale `v` to unit L2 norm. Returns false (leaving `v` untouched) for a
/// zero vector.
pub fn l2_normalize(v: &mut [f32]) -> bool {
    let norm: f32 = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return false;
    }
    for x in v.iter_mut() {
        *x /= norm;
    }
    true
}

/// Embed and normalize; zero-norm outputs are malformed.
pub fn embed_unit(embedder: &dyn Embedder, text: &str) -> Result<Vec<f32>, BackendError> {
    let mut v = embedder.embed(text)?;
    if v.is_empty() {
        return Err(BackendError::Malformed("empty embedding".into()));
    }
    if !l2_normalize(&mut v) {
        return Err(BackendError::Malformed("zero-norm embedding".into()));
    }
    Ok(v)
}

/// FNV-1a, seeded. Stable across platforms and releases, which the std
/// hasher does not promise.
pub fn fnv1a_64(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

/// Privacy-safe digest of request content for traces: a hash, never the text.
pub fn content_digest<'a>(parts: impl IntoIterator<Item = &'a str>) -> String {
    let mut h = 0u64;
    for p in parts {
        h = fnv1a_64(h, p.as_bytes());
        h = fnv1a_64(h, &[0x1f]);
    }
    format!("{h:016x}")
}

// ---------------------------------------------------------------------------
// Mock backends

/// Deterministic bag-of-words embedder: tokens hash into a fixed number of
/// buckets, counts are L2-normalized. Same seed and text always give the
/// same vector.
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    pub seed: u64,
    pub dim: usize,
}

impl MockEmbedder {
    pub fn new(seed: u64) -> Self {
        MockEmbedder { seed, dim: 64 }
    }
}

impl Embedder for MockEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f32>, BackendError> {
        let mut v = vec![0.0f32; self.dim];
        let lower = text.to_lowercase();
        for token in lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
            let bucket = (fnv1a_64(self.seed, token.as_bytes()) % self.dim as u64) as usize;
            v[bucket] += 1.0;
        }
        // Whole-text feature keeps even token-free inputs off the origin.
        let bucket = (fnv1a_64(self.seed ^ 0xa5a5, lower.trim().as_bytes()) % self.dim as u64) as usize;
        v[bucket] += 1.0;
        l2_normalize(&mut v);
        Ok(v)
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn name(&self) -> &str {
        "mock-embedder"
    }
}

/// Replays a fixed script of replies (or faults) in order. Exhaustion is a
/// malformed reply, which keeps broken tests loud.
#[derive(Debug, Default)]
pub struct ScriptedChat {
    script: Mutex<VecDeque<Result<String, BackendError>>>,
    requests: Mutex<Vec<ChatRequest>>,
}

impl ScriptedChat {
    pub fn new(replies: impl IntoIterator<Item = Result<String, BackendError>>) -> Self {
        ScriptedChat {
            script: Mutex::new(replies.into_iter().collect()),
            requests: Mutex::new(Vec::new()),
        }
    }

    pub fn of_texts(replies: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self::new(replies.into_iter().map(|r| Ok(r.into())))
    }

    /// Requests seen so far, for assertions.
    pub fn requests(&self) -> Vec<ChatRequest> {
        self.requests.lock().expect("script lock").clone()
    }

    pub fn remaining(&self) -> usize {
        self.script.lock().expect("script lock").len()
    }
}

impl ChatBackend for ScriptedChat {
    fn chat(&self, request: &ChatRequest) -> Result<String, BackendError> {
        self.requests.lock().expect("script lock").push(request.clone());
        self.script
            .lock()
            .expect("script lock")
            .pop_front()
            .unwrap_or_else(|| Err(BackendError::Malformed("chat script exhausted".into())))
    }

    fn name(&self) -> &str {
        "scripted-chat"
    }
}

/// Answers by matching markers against the request text: the first rule whose
/// marker occurs in the system prompt or any message wins. Useful when call
/// order is not worth scripting exactly.
#[derive(Debug, Default)]
pub struct KeywordChat {
    rules: Vec<(String, String)>,
    fallback: Option<String>,
    requests: Mutex<Vec<ChatRequest>>,
}

impl KeywordChat {
    pub fn new() -> Self {
        KeywordChat::default()
    }

    pub fn rule(mut self, marker: impl Into<String>, reply: impl Into<String>) -> Self {
        self.rules.push((marker.into(), reply.into()));
        self
    }

    pub fn fallback(mut self, reply: impl Into<String>) -> Self {
        self.fallback = Some(reply.into());
        self
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.requests.lock().expect("keyword lock").clone()
    }
}

impl ChatBackend for KeywordChat {
    fn chat(&self, request: &ChatRequest) -> Result<String, BackendError> {
        self.requests.lock().expect("keyword lock").push(request.clone());
        let haystack: String = std::iter::once(request.system.as_str())
            .chain(request.messages.iter().map(|m| m.content.as_str()))
            .collect::<Vec<_>>()
            .join("\n");
        for (marker, reply) in &self.rules {
            if haystack.contains(marker) {
                return Ok(reply.clone());
            }
        }
        self.fallback
            .clone()
            .ok_or_else(|| BackendError::Malformed("no keyword rule matched".into()))
    }

    fn name(&self) -> &str {
        "keyword-chat"
    }
}

/// A chat backend that always fails; forces prior projection onto its
/// fallback path in tests.
#[derive(Debug, Default)]
pub struct FailingChat;

impl ChatBackend for FailingChat {
    fn chat(&self, _request: &ChatRequest) -> Result<String, BackendError> {
        Err(BackendError::Transport("backend intentionally offline".into()))
    }

    fn name(&self) -> &str {
        "failing-chat"
    }
}

// ---------------------------------------------------------------------------
// Retry policy

/// Exponential backoff for transient faults. Auth and malformed replies
/// surface immediately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub tries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { tries: 3, base_delay_ms: 200, max_delay_ms: 4000 }
    }
}

impl RetryPolicy {
    /// Delay before retrying after `attempt` (1-based) failed.
    fn delay_for(&self, attempt: u32, error: &BackendError) -> Duration {
        let backoff = self
            .base_delay_ms
            .saturating_mul(1u64 << (attempt.saturating_sub(1)).min(16));
        let ms = match error {
            BackendError::RateLimited { retry_after_ms: Some(ms) } => *ms,
            _ => backoff,
        };
        Duration::from_millis(ms.min(self.max_delay_ms))
    }

    pub fn run<T>(
        &self,
        mut op: impl FnMut(u32) -> Result<T, BackendError>,
    ) -> Result<T, BackendError> {
        let tries = self.tries.max(1);
        let mut attempt = 1;
        loop {
            match op(attempt) {
                Ok(v) => return Ok(v),
                Err(e) if e.is_transient() && attempt < tries => {
                    std::thread::sleep(self.delay_for(attempt, &e));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

// ---------------------------------------------------------------------------
// HTTP providers

/// Counting semaphore bounding in-flight provider calls.
#[derive(Debug)]
struct Gate {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn new(n: usize) -> Self {
        Gate { permits: Mutex::new(n.max(1)), cv: Condvar::new() }
    }

    fn acquire(&self) -> GateGuard<'_> {
        let mut permits = self.permits.lock().expect("gate lock");
        while *permits == 0 {
            permits = self.cv.wait(permits).expect("gate wait");
        }
        *permits -= 1;
        GateGuard(self)
    }
}

struct GateGuard<'a>(&'a Gate);

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().expect("gate lock") += 1;
        self.0.cv.notify_one();
    }
}

/// Connection settings for an OpenAI-compatible chat completions endpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HttpChatConfig {
    /// Full URL of the chat completions route.
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    /// Ceiling on concurrent in-flight calls to this provider.
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_timeout_ms() -> u64 {
    60_000
}

pub(crate) fn default_concurrency() -> usize {
    8
}

pub struct HttpChat {
    config: HttpChatConfig,
    client: reqwest::blocking::Client,
    gate: Gate,
    trace: Mutex<Option<Arc<TraceLog>>>,
}

impl HttpChat {
    pub fn new(config: HttpChatConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let gate = Gate::new(config.max_concurrency);
        Ok(HttpChat { config, client, gate, trace: Mutex::new(None) })
    }

    /// Route per-call records (digest, latency, outcome) into a run trace.
    pub fn set_trace(&self, trace: Arc<TraceLog>) {
        *self.trace.lock().expect("trace slot") = Some(trace);
    }

    fn bearer(&self) -> Result<Option<String>, BackendError> {
        match &self.config.api_key_env {
            None => Ok(None),
            Some(var) => match std::env::var(var) {
                Ok(key) if !key.is_empty() => Ok(Some(key)),
                _ => Err(BackendError::Auth(format!("environment variable {var} is not set"))),
            },
        }
    }

    fn call_once(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let mut body = serde_json::json!({
            "model": self.config.model,
            "messages": wire_messages(request),
        });
        if let Value::Object(extra) = &request.sampling {
            let obj = body.as_object_mut().expect("body is an object");
            for (k, v) in extra {
                obj.insert(k.clone(), v.clone());
            }
        }
        let mut http = self.client.post(&self.config.endpoint).json(&body);
        if let Some(key) = self.bearer()? {
            http = http.bearer_auth(key);
        }
        let response = http.send().map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = response.status();
        let retry_after_ms = response
            .headers()
            .get("retry-after")
            .and_then(|v| v.to_str().ok())
            .and_then(|s| s.trim().parse::<u64>().ok())
            .map(|secs| secs * 1000);
        let text = response
            .text()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        match status.as_u16() {
            200 => {
                let v: Value = serde_json::from_str(&text)
                    .map_err(|e| BackendError::Malformed(format!("response not JSON: {e}")))?;
                v["choices"][0]["message"]["content"]
                    .as_str()
                    .map(|s| s.to_string())
                    .ok_or_else(|| {
                        BackendError::Malformed("response lacks choices[0].message.content".into())
                    })
            }
            401 | 403 => Err(BackendError::Auth(format!("status {status}"))),
            429 => Err(BackendError::RateLimited { retry_after_ms }),
            s if s >= 500 => Err(BackendError::Transport(format!("status {status}"))),
            _ => Err(BackendError::Malformed(format!("status {status}: {text}"))),
        }
    }

    fn record(&self, request: &ChatRequest, started: Instant, outcome: &Result<String, BackendError>) {
        if let Some(trace) = self.trace.lock().expect("trace slot").as_ref() {
            let digest = content_digest(
                std::iter::once(request.system.as_str())
                    .chain(request.messages.iter().map(|m| m.content.as_str())),
            );
            trace.append(
                TraceStage::Execute,
                serde_json::json!({
                    "provider_call": "chat",
                    "provider": self.name(),
                    "model": self.config.model,
                    "request_digest": digest,
                    "latency_ms": started.elapsed().as_millis() as u64,
                    "ok": outcome.is_ok(),
                    "error": outcome.as_ref().err().map(|e| e.class()),
                }),
            );
        }
    }
}

fn wire_messages(request: &ChatRequest) -> Vec<Value> {
    let mut out = Vec::with_capacity(request.messages.len() + 1);
    if !request.system.is_empty() {
        out.push(serde_json::json!({"role": "system", "content": request.system}));
    }
    for m in &request.messages {
        let role = match m.role {
            Role::User => "user",
            Role::Assistant => "assistant",
            Role::Tool => "tool",
        };
        out.push(serde_json::json!({"role": role, "content": m.content}));
    }
    out
}

impl ChatBackend for HttpChat {
    fn chat(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let _slot = self.gate.acquire();
        let retry = self.config.retry.clone();
        retry.run(|_attempt| {
            let started = Instant::now();
            let outcome = self.call_once(request);
            self.record(request, started, &outcome);
            outcome
        })
    }

    fn name(&self) -> &str {
        "http-chat"
    }
}

/// Connection settings for an OpenAI-compatible embeddings endpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HttpEmbedderConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    pub dimension: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
}

pub struct HttpEmbedder {
    config: HttpEmbedderConfig,
    client: reqwest::blocking::Client,
}

impl HttpEmbedder {
    pub fn new(config: HttpEmbedderConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(HttpEmbedder { config, client })
    }
}

impl Embedder for HttpEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f32>, BackendError> {
        self.config.retry.clone().run(|_| {
            let body = serde_json::json!({"model": self.config.model, "input": text});
            let mut http = self.client.post(&self.config.endpoint).json(&body);
            if let Some(var) = &self.config.api_key_env {
                match std::env::var(var) {
                    Ok(key) if !key.is_empty() => http = http.bearer_auth(key),
                    _ => return Err(BackendError::Auth(format!("environment variable {var} is not set"))),
                }
            }
            let response = http.send().map_err(|e| BackendError::Transport(e.to_string()))?;
            let status = response.status().as_u16();
            let text_body = response
                .text()
                .map_err(|e| BackendError::Transport(e.to_string()))?;
            match status {
                200 => {
                    let v: Value = serde_json::from_str(&text_body)
                        .map_err(|e| BackendError::Malformed(format!("response not JSON: {e}")))?;
                    let arr = v["data"][0]["embedding"]
                        .as_array()
                        .ok_or_else(|| BackendError::Malformed("response lacks data[0].embedding".into()))?;
                    arr.iter()
                        .map(|x| x.as_f64().map(|f| f as f32))
                        .collect::<Option<Vec<f32>>>()
                        .ok_or_else(|| BackendError::Malformed("non-numeric embedding".into()))
                }
                401 | 403 => Err(BackendError::Auth(format!("status {status}"))),
                429 => Err(BackendError::RateLimited { retry_after_ms: None }),
                s if s >= 500 => Err(BackendError::Transport(format!("status {status}"))),
                _ => Err(BackendError::Malformed(format!("status {status}"))),
            }
        })
    }

    fn dimension(&self) -> usize {
        self.config.dimension
    }

    fn name(&self) -> &str {
        "http-embedder"
    }
}

// ---------------------------------------------------------------------------
// Tracing decorators

/// Wraps any chat backend so every call lands in the run trace as a digest
/// plus latency, regardless of provider.
pub struct TracedChat<C> {
    inner: C,
    trace: Arc<TraceLog>,
}

impl<C: ChatBackend> TracedChat<C> {
    pub fn new(inner: C, trace: Arc<TraceLog>) -> Self {
        TracedChat { inner, trace }
    }
}

impl<C: ChatBackend> ChatBackend for TracedChat<C> {
    fn chat(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let started = Instant::now();
        let outcome = self.inner.chat(request);
        let digest = content_digest(
            std::iter::once(request.system.as_str())
                .chain(request.messages.iter().map(|m| m.content.as_str())),
        );
        self.trace.append(
            TraceStage::Execute,
            serde_json::json!({
                "provider_call": "chat",
                "provider": self.inner.name(),
                "request_digest": digest,
                "latency_ms": started.elapsed().as_millis() as u64,
                "ok": outcome.is_ok(),
                "error": outcome.as_ref().err().map(|e| e.class()),
            }),
        );
        outcome
    }

    fn name(&self) -> &str {
        self.inner.name()
    }
}

// ---------------------------------------------------------------------------
// Planner

const PLAN_SYSTEM_PROMPT: &str = "You plan wide-search table tasks before any searching happens.\n\
Reply with exactly one JSON object and no other text. Fields:\n\
- \"task_matrix\": {\"columns\": [...], \"rows\": [[...], ...]}. Everything already known: one row per item the request enumerates, one column per known attribute. Every cell must hold a real value (never empty, never a placeholder like \"not found\").\n\
- \"template\": one task prompt with slots __0__, __1__, ... standing for columns 0, 1, ... of a matrix row.\n\
- \"batch_strategy\": {\"mode\": \"per_atom\" | \"by_attr\" | \"open\", \"rationale\": \"...\"}. Use per_atom only when rows are few (under about 20) and unrelated. by_attr adds \"attribute_index\" (or \"attribute_name\"; a list means a composite key) and groups rows sharing that value so one agent answers a whole group. open adds explicit \"groups\" of row indices and/or a \"chunk_size\" for the remainder.\n\
- \"batch_size\": positive integer, default rows per batch.\n\
Keep the planned batch count under 50.";

/// Render the stage-one planning request.
fn plan_request(query: &Query, observations: &[String]) -> String {
    let mut out = String::new();
    out.push_str("Request: ");
    out.push_str(&query.text);
    out.push_str("\n\nThe final table must have exactly these columns: ");
    out.push_str(&query.schema.columns.join(", "));
    out.push_str("\nKey column(s): ");
    out.push_str(&query.schema.key_columns.join(", "));
    if !observations.is_empty() {
        out.push_str("\n\nScouting observations:\n");
        for (i, obs) in observations.iter().enumerate() {
            out.push_str(&format!("{}. {}\n", i + 1, obs));
        }
    }
    out.push_str("\nReply with the plan JSON.");
    out
}

/// Compact description of a decision for exemplar blocks.
pub fn summarize_decision(d: &Decision) -> String {
    let strat = match &d.strategy {
        crate::types::BatchStrategy::PerAtom { .. } => "per_atom".to_string(),
        crate::types::BatchStrategy::ByAttr { attribute_name, attribute_index, .. } => {
            if attribute_name.is_empty() {
                format!("by_attr(column {attribute_index:?})")
            } else {
                format!("by_attr({})", attribute_name.join("+"))
            }
        }
        crate::types::BatchStrategy::Open { groups, chunk_size, .. } => {
            format!("open({} groups, chunk_size={chunk_size:?})", groups.len())
        }
    };
    format!(
        "matrix {}x{}, strategy {}, batch_size {}",
        d.matrix.len(),
        d.matrix.width(),
        strat,
        d.batch_size
    )
}

/// Render the stage-two message carrying the experiential prior.
fn prior_block(prior: &ExperientialPrior) -> String {
    let mut out = String::new();
    out.push_str("Guidance distilled from earlier runs of similar tasks:\n");
    out.push_str(&prior.guidance);
    if let Some(pos) = &prior.positive_exemplar {
        out.push_str("\n\nA similar task that succeeded used: ");
        out.push_str(&summarize_decision(&pos.decision));
    }
    if let Some(neg) = &prior.negative_exemplar {
        out.push_str("\nA similar task that failed used: ");
        out.push_str(&summarize_decision(&neg.decision));
    }
    out.push_str("\n\nRevise the plan where the guidance warrants and reply with the full plan JSON again.");
    out
}

/// Parse a plan reply into a decision. The error string names what was wrong
/// so the repair turn can say it.
fn parse_plan(text: &str, query: &Query) -> Result<Decision, String> {
    let candidates = extract_json_values(text);
    let plan = candidates
        .iter()
        .find(|v| v.get("task_matrix").is_some())
        .ok_or_else(|| "no JSON object with a task_matrix field".to_string())?;

    let tm = &plan["task_matrix"];
    let columns: Vec<String> = tm["columns"]
        .as_array()
        .ok_or_else(|| "task_matrix.columns must be a list".to_string())?
        .iter()
        .map(crate::executor::json_value_to_cell)
        .collect();
    let rows: Vec<Vec<String>> = tm["rows"]
        .as_array()
        .ok_or_else(|| "task_matrix.rows must be a list of lists".to_string())?
        .iter()
        .map(|row| {
            row.as_array()
                .map(|cells| cells.iter().map(crate::executor::json_value_to_cell).collect())
                .ok_or_else(|| "task_matrix.rows must be a list of lists".to_string())
        })
        .collect::<Result<_, _>>()?;
    let matrix = TaskMatrix::new(columns, rows).map_err(|e| format!("task_matrix invalid: {e}"))?;

    let template_text = plan["template"]
        .as_str()
        .ok_or_else(|| "template must be a string".to_string())?;
    let template =
        Template::new(template_text).map_err(|e| format!("template invalid: {e}"))?;

    let raw: RawStrategy = serde_json::from_value(plan["batch_strategy"].clone())
        .map_err(|e| format!("batch_strategy invalid: {e}"))?;
    let strategy =
        normalize_strategy(&raw, &matrix).map_err(|e| format!("batch_strategy invalid: {e}"))?;

    let batch_size = plan["batch_size"]
        .as_u64()
        .ok_or_else(|| "batch_size must be a positive integer".to_string())?
        as usize;

    Decision::new(matrix, template, strategy, batch_size, query.schema.clone())
        .map_err(|e| format!("decision invalid: {e}"))
}

/// Chat-backed planner. Stage one proposes a decision from the query and
/// observations; when a prior exists, stage two revises it with that prior in
/// context. Each stage gets one repair turn on a parse failure.
pub struct ChatPlanner {
    pub chat: Arc<dyn ChatBackend>,
    pub sampling: Value,
}

impl ChatPlanner {
    pub fn new(chat: Arc<dyn ChatBackend>) -> Self {
        ChatPlanner { chat, sampling: Value::Null }
    }

    /// One stage: send, parse, and on failure repair once.
    fn stage(&self, request: &mut ChatRequest, query: &Query) -> Result<(Decision, String), PlanError> {
        let reply = self.chat.chat(request)?;
        match parse_plan(&reply, query) {
            Ok(d) => Ok((d, reply)),
            Err(reason) => {
                request.push(Role::Assistant, reply);
                request.push(
                    Role::User,
                    format!(
                        "Your plan JSON was invalid: {reason}. Resend the corrected JSON only, keeping every valid field unchanged."
                    ),
                );
                let reply = self.chat.chat(request)?;
                match parse_plan(&reply, query) {
                    Ok(d) => Ok((d, reply)),
                    Err(reason) => Err(PlanError::Unparseable(reason)),
                }
            }
        }
    }
}

impl Planner for ChatPlanner {
    fn plan(
        &self,
        query: &Query,
        observations: &[String],
        prior: Option<&ExperientialPrior>,
    ) -> Result<Decision, PlanError> {
        let mut request = ChatRequest::user(PLAN_SYSTEM_PROMPT, plan_request(query, observations));
        request.sampling = self.sampling.clone();
        let (first, first_reply) = self.stage(&mut request, query)?;
        let Some(prior) = prior else {
            return Ok(first);
        };
        let mut revise = ChatRequest::user(PLAN_SYSTEM_PROMPT, plan_request(query, observations));
        revise.sampling = self.sampling.clone();
        revise.push(Role::Assistant, first_reply);
        revise.push(Role::User, prior_block(prior));
        let (d, _) = self.stage(&mut revise, query)?;
        Ok(d)
    }
}

// ---------------------------------------------------------------------------
// Tool-loop solver

/// Solves batches by driving a chat agent through the JSON tool protocol
/// against a tool environment (search/crawl or similar).
pub struct ToolLoopSolver {
    pub chat: Arc<dyn ChatBackend>,
    pub env: Arc<dyn ToolEnvironment>,
    pub max_steps: usize,
    pub sampling: Value,
}

impl ToolLoopSolver {
    pub fn new(chat: Arc<dyn ChatBackend>, env: Arc<dyn ToolEnvironment>) -> Self {
        ToolLoopSolver { chat, env, max_steps: 20, sampling: Value::Null }
    }
}

/// Task text a solver agent sees for one batch.
pub fn render_batch_task(request: &SolverRequest) -> String {
    let mut out = String::new();
    if !request.shared_context.is_empty() {
        out.push_str("Shared context: ");
        out.push_str(&request.shared_context);
        out.push_str("\n\n");
    }
    out.push_str("Tasks:\n");
    for (i, task) in request.batch.tasks.iter().enumerate() {
        out.push_str(&format!("{}. {}\n", i + 1, task.prompt));
    }
    out.push_str(
        "\nAnswer every task. When done, call final_answer whose \"answer\" is JSONL: one JSON object per task row, each with exactly these keys: ",
    );
    out.push_str(&request.schema_columns.join(", "));
    out.push_str(". Use \"\" for values you could not find.");
    out
}

impl BatchSolver for ToolLoopSolver {
    fn solve_batch(&self, request: &SolverRequest) -> Result<String, BackendError> {
        let task = render_batch_task(request);
        run_tool_loop(self.chat.as_ref(), self.env.as_ref(), &task, self.max_steps, &self.sampling)
            .map_err(|e| match e {
                ToolLoopError::Backend(b) => b,
                other => BackendError::Malformed(other.to_string()),
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Schema;
    use std::io::{Read, Write};
    use std::net::TcpListener;

    #[test]
    fn fnv_digest_is_stable() {
        // Published FNV-1a test vectors; catches accidental changes.
        assert_eq!(fnv1a_64(0, b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a_64(0, b"a"), 0xaf63_dc4c_8601_ec8c);
        let a = content_digest(["sys", "user"]);
        let b = content_digest(["sys", "user"]);
        assert_eq!(a, b);
        assert_ne!(a, content_digest(["sys", "user2"]));
        assert_ne!(a, content_digest(["sysuser"]));
    }

    #[test]
    fn mock_embedder_is_deterministic_and_unit_norm() {
        let e = MockEmbedder::new(7);
        let a = embed_unit(&e, "acme founded year").unwrap();
        let b = embed_unit(&e, "acme founded year").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 64);
        let norm: f32 = a.iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
        // Different seed, different vector.
        let c = embed_unit(&MockEmbedder::new(8), "acme founded year").unwrap();
        assert_ne!(a, c);
        // Empty text still embeds.
        assert!(embed_unit(&e, "").is_ok());
    }

    #[test]
    fn retry_recovers_from_transient_faults_only() {
        let policy = RetryPolicy { tries: 3, base_delay_ms: 1, max_delay_ms: 2 };
        let mut calls = 0;
        let out = policy.run(|_| {
            calls += 1;
            if calls < 3 {
                Err(BackendError::Transport("flaky".into()))
            } else {
                Ok("done")
            }
        });
        assert_eq!(out.unwrap(), "done");
        assert_eq!(calls, 3);

        let mut calls = 0;
        let out: Result<(), _> = policy.run(|_| {
            calls += 1;
            Err(BackendError::Auth("bad key".into()))
        });
        assert!(matches!(out, Err(BackendError::Auth(_))));
        assert_eq!(calls, 1);

        let mut calls = 0;
        let out: Result<(), _> = policy.run(|_| {
            calls += 1;
            Err(BackendError::Transport("down".into()))
        });
        assert!(matches!(out, Err(BackendError::Transport(_))));
        assert_eq!(calls, 3);
    }

    #[test]
    fn scripted_chat_replays_in_order_and_records_requests() {
        let chat = ScriptedChat::new(vec![
            Ok("first".to_string()),
            Err(BackendError::RateLimited { retry_after_ms: Some(10) }),
            Ok("second".to_string()),
        ]);
        let req = ChatRequest::user("sys", "hello");
        assert_eq!(chat.chat(&req).unwrap(), "first");
        assert!(matches!(chat.chat(&req), Err(BackendError::RateLimited { .. })));
        assert_eq!(chat.chat(&req).unwrap(), "second");
        assert!(matches!(chat.chat(&req), Err(BackendError::Malformed(_))));
        assert_eq!(chat.requests().len(), 4);
    }

    #[test]
    fn keyword_chat_matches_first_rule() {
        let chat = KeywordChat::new()
            .rule("insight", "1. group by sector")
            .rule("plan", "{}")
            .fallback("??");
        let reply = chat.chat(&ChatRequest::user("sys", "give insight now")).unwrap();
        assert_eq!(reply, "1. group by sector");
        let reply = chat.chat(&ChatRequest::user("sys", "nothing matches")).unwrap();
        assert_eq!(reply, "??");
    }

    /// Minimal scripted HTTP server: one canned response per incoming
    /// connection, then the listener closes.
    fn spawn_http(responses: Vec<String>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let mut seen = Vec::new();
            for response in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut buf = vec![0u8; 65536];
                let mut read_total = 0;
                // Read until the body promised by content-length arrives.
                loop {
                    let n = stream.read(&mut buf[read_total..]).unwrap();
                    read_total += n;
                    let text = String::from_utf8_lossy(&buf[..read_total]).to_string();
                    if let Some(header_end) = text.find("\r\n\r\n") {
                        let need: usize = text
                            .lines()
                            .find(|l| l.to_lowercase().starts_with("content-length:"))
                            .and_then(|l| l.split(':').nth(1))
                            .and_then(|v| v.trim().parse().ok())
                            .unwrap_or(0);
                        if text.len() >= header_end + 4 + need {
                            seen.push(text);
                            break;
                        }
                    }
                    if n == 0 {
                        seen.push(text);
                        break;
                    }
                }
                stream.write_all(response.as_bytes()).unwrap();
            }
            seen
        });
        (format!("http://{addr}/v1/chat/completions"), handle)
    }

    fn http_response(status: &str, headers: &str, body: &str) -> String {
        format!(
            "HTTP/1.1 {status}\r\ncontent-length: {}\r\nconnection: close\r\n{headers}\r\n{body}",
            body.len()
        )
    }

    fn chat_body(content: &str) -> String {
        serde_json::json!({
            "choices": [{"message": {"role": "assistant", "content": content}}]
        })
        .to_string()
    }

    #[test]
    fn http_chat_retries_rate_limit_then_succeeds() {
        let (endpoint, server) = spawn_http(vec![
            http_response("429 Too Many Requests", "retry-after: 0\r\n", "slow down"),
            http_response("200 OK", "content-type: application/json\r\n", &chat_body("hi there")),
        ]);
        let backend = HttpChat::new(HttpChatConfig {
            endpoint,
            model: "test-model".into(),
            api_key_env: None,
            timeout_ms: 5000,
            max_concurrency: 2,
            retry: RetryPolicy { tries: 3, base_delay_ms: 1, max_delay_ms: 5 },
        })
        .unwrap();
        let trace = TraceLog::new();
        backend.set_trace(Arc::clone(&trace));
        let reply = backend.chat(&ChatRequest::user("sys", "ping")).unwrap();
        assert_eq!(reply, "hi there");
        let requests = server.join().unwrap();
        assert_eq!(requests.len(), 2);
        assert!(requests[0].contains("test-model"));
        // Both calls traced with digests, first marked failed.
        let events = trace.events();
        assert_eq!(events.len(), 2);
        assert_eq!(events[0].payload["ok"], serde_json::json!(false));
        assert_eq!(events[1].payload["ok"], serde_json::json!(true));
        assert!(events[1].payload["request_digest"].as_str().unwrap().len() == 16);
    }

    #[test]
    fn http_chat_auth_failure_is_immediate() {
        let (endpoint, server) = spawn_http(vec![http_response(
            "401 Unauthorized",
            "",
            "no",
        )]);
        let backend = HttpChat::new(HttpChatConfig {
            endpoint,
            model: "m".into(),
            api_key_env: None,
            timeout_ms: 5000,
            max_concurrency: 1,
            retry: RetryPolicy { tries: 3, base_delay_ms: 1, max_delay_ms: 5 },
        })
        .unwrap();
        let out = backend.chat(&ChatRequest::user("sys", "ping"));
        assert!(matches!(out, Err(BackendError::Auth(_))));
        assert_eq!(server.join().unwrap().len(), 1);
    }

    #[test]
    fn http_chat_missing_key_env_is_auth_error_without_network() {
        let backend = HttpChat::new(HttpChatConfig {
            endpoint: "http://127.0.0.1:9/unused".into(),
            model: "m".into(),
            api_key_env: Some("WIDEMAP_TEST_KEY_THAT_IS_NOT_SET".into()),
            timeout_ms: 100,
            max_concurrency: 1,
            retry: RetryPolicy::default(),
        })
        .unwrap();
        assert!(matches!(
            backend.chat(&ChatRequest::user("s", "u")),
            Err(BackendError::Auth(_))
        ));
    }

    fn query() -> Query {
        Query::new(
            "find founding years",
            Schema::new(vec!["Name".into(), "Year".into()], None).unwrap(),
        )
        .unwrap()
    }

    fn good_plan_json() -> String {
        serde_json::json!({
            "task_matrix": {"columns": ["Name"], "rows": [["Acme"], ["Globex"]]},
            "template": "When was __0__ founded?",
            "batch_strategy": {"mode": "per_atom", "rationale": "two easy rows"},
            "batch_size": 1
        })
        .to_string()
    }

    #[test]
    fn planner_parses_a_clean_reply() {
        let chat = Arc::new(ScriptedChat::of_texts([good_plan_json()]));
        let planner = ChatPlanner::new(chat.clone());
        let d = planner.plan(&query(), &[], None).unwrap();
        assert_eq!(d.matrix.len(), 2);
        assert_eq!(d.batch_size, 1);
        assert_eq!(d.output_schema.columns, vec!["Name", "Year"]);
        assert_eq!(chat.requests().len(), 1);
    }

    #[test]
    fn planner_repairs_once_then_gives_up() {
        let chat = Arc::new(ScriptedChat::of_texts([
            "not json at all".to_string(),
            good_plan_json(),
        ]));
        let planner = ChatPlanner::new(chat.clone());
        assert!(planner.plan(&query(), &[], None).is_ok());
        let reqs = chat.requests();
        assert_eq!(reqs.len(), 2);
        assert!(reqs[1].messages.last().unwrap().content.contains("invalid"));

        let chat = Arc::new(ScriptedChat::of_texts(["nope", "still nope"]));
        let planner = ChatPlanner::new(chat);
        assert!(matches!(
            planner.plan(&query(), &[], None),
            Err(PlanError::Unparseable(_))
        ));
    }

    #[test]
    fn planner_runs_stage_two_when_prior_present() {
        let revised = serde_json::json!({
            "task_matrix": {"columns": ["Name"], "rows": [["Acme"], ["Globex"]]},
            "template": "When was __0__ founded?",
            "batch_strategy": {"mode": "open", "chunk_size": 2, "rationale": "group them"},
            "batch_size": 2
        })
        .to_string();
        let chat = Arc::new(ScriptedChat::of_texts([good_plan_json(), revised]));
        let planner = ChatPlanner::new(chat.clone());
        let prior = ExperientialPrior {
            guidance: "1. batch related rows together".into(),
            positive_exemplar: None,
            negative_exemplar: None,
            used_hints: vec![],
        };
        let d = planner.plan(&query(), &["obs one".into()], Some(&prior)).unwrap();
        assert_eq!(d.batch_size, 2);
        let reqs = chat.requests();
        assert_eq!(reqs.len(), 2);
        assert!(reqs[1]
            .messages
            .iter()
            .any(|m| m.content.contains("batch related rows together")));
    }
}
