//! Uniform access to generation and judge backends.
//!
//! A [`Gateway`] wraps one [`Backend`] with retry/backoff, a bounded
//! in-flight window for batches, and optional JSONL request logging. The
//! HTTP backend speaks the common chat-completions JSON schema; the mock
//! backends are deterministic and are what the test-suite runs against.

mod http;
mod mock;

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Mode;
use crate::error::{Error, Result};

pub use http::HttpChatBackend;
pub use mock::{
    extract_passage, EchoBackend, LossyBackend, Reply, Rule, ScriptEntry, ScriptKey,
    ScriptedBackend,
};

pub const DEFAULT_TEMPERATURE: f64 = 0.75;
pub const DEFAULT_TOP_P: f64 = 0.9;
pub const DEFAULT_API_KEY_ENV: &str = "SYNTH_EVAL_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub system_prompt: String,
    pub user_prompt: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl GenerationRequest {
    pub fn new(system_prompt: impl Into<String>, user_prompt: impl Into<String>, max_tokens: u32) -> Self {
        GenerationRequest {
            system_prompt: system_prompt.into(),
            user_prompt: user_prompt.into(),
            temperature: DEFAULT_TEMPERATURE,
            top_p: DEFAULT_TOP_P,
            max_tokens,
            seed: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(Error::InvalidInput(format!("temperature {} outside [0,2]", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::InvalidInput(format!("top_p {} outside (0,1]", self.top_p)));
        }
        if self.max_tokens == 0 {
            return Err(Error::InvalidInput("max_tokens must be >= 1".into()));
        }
        Ok(())
    }

    /// Stable hex digest of the prompts, used to key scripted replies.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.system_prompt.as_bytes());
        h.update([0u8]);
        h.update(self.user_prompt.as_bytes());
        let digest = h.finalize();
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    pub backend_tag: String,
    pub latency_ms: u64,
    pub truncated: bool,
}

/// What a backend hands back for one call, before gateway bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct RawReply {
    pub text: String,
    /// `Some(true)` when the backend reported stopping at `max_tokens`.
    pub hit_max_tokens: Option<bool>,
}

impl RawReply {
    pub fn text(text: impl Into<String>) -> Self {
        RawReply {
            text: text.into(),
            hit_max_tokens: Some(false),
        }
    }
}

pub trait Backend: Send + Sync {
    fn tag(&self) -> String;
    fn call(&self, request: &GenerationRequest) -> Result<RawReply>;
}

// ---------------------------------------------------------------------------
// token budget

/// Word-count bands mapped to generation budgets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenBudget {
    /// `(upper_word_bound_inclusive, max_tokens)` in ascending order.
    pub note_bands: Vec<(usize, u32)>,
    pub note_overflow: u32,
    pub chunk: u32,
}

impl Default for TokenBudget {
    fn default() -> Self {
        TokenBudget {
            note_bands: vec![(500, 1000), (1000, 2000), (2000, 4000), (4000, 8000)],
            note_overflow: 10_000,
            chunk: 512,
        }
    }
}

impl TokenBudget {
    pub fn max_tokens(&self, word_count: usize, mode: Mode) -> u32 {
        match mode {
            Mode::ByChunk => self.chunk,
            Mode::ByNote => self
                .note_bands
                .iter()
                .find(|(upper, _)| word_count <= *upper)
                .map(|(_, t)| *t)
                .unwrap_or(self.note_overflow),
        }
    }
}

/// Generation budget under the default band table.
pub fn max_tokens_for_length(word_count: usize, mode: Mode) -> u32 {
    TokenBudget::default().max_tokens(word_count, mode)
}

// ---------------------------------------------------------------------------
// configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    HttpChat,
    MockEcho,
    MockScripted,
    MockLossy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_backoff_ms: 500,
        }
    }
}

impl RetryPolicy {
    /// Delays slept before attempts 2..=max_attempts.
    pub fn delays(&self) -> impl Iterator<Item = Duration> + '_ {
        (1..self.max_attempts.max(1)).map(move |k| {
            Duration::from_millis(self.base_backoff_ms.saturating_mul(1u64 << (k - 1).min(62)))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossyConfig {
    /// Fraction of trailing sentences dropped from every passage.
    pub fraction: f64,
    /// Append one fabricated sentence per call.
    pub inject_unsupported: bool,
}

impl Default for LossyConfig {
    fn default() -> Self {
        LossyConfig {
            fraction: 0.3,
            inject_unsupported: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScriptedConfig {
    /// JSONL script; see [`ScriptEntry`].
    pub script: Option<PathBuf>,
    /// Built-in rule used when no script entry applies.
    pub rule: Option<Rule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint: Option<String>,
    pub model_name: Option<String>,
    pub api_key_env: String,
    pub require_auth: bool,
    pub supports_seed: bool,
    pub timeout_ms: u64,
    pub max_concurrency: usize,
    pub retry: RetryPolicy,
    pub lossy: LossyConfig,
    pub scripted: ScriptedConfig,
    pub log_path: Option<PathBuf>,
    pub redact_prompts: bool,
    pub temperature: Option<f64>,
    pub top_p: Option<f64>,
    pub seed: Option<u64>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::MockEcho,
            endpoint: None,
            model_name: None,
            api_key_env: DEFAULT_API_KEY_ENV.to_string(),
            require_auth: false,
            supports_seed: true,
            timeout_ms: 120_000,
            max_concurrency: 4,
            retry: RetryPolicy::default(),
            lossy: LossyConfig::default(),
            scripted: ScriptedConfig::default(),
            log_path: None,
            redact_prompts: false,
            temperature: None,
            top_p: None,
            seed: None,
        }
    }
}

impl BackendConfig {
    pub fn of_kind(kind: BackendKind) -> Self {
        BackendConfig {
            kind,
            ..Default::default()
        }
    }

    pub fn lossy(fraction: f64, inject_unsupported: bool) -> Self {
        BackendConfig {
            kind: BackendKind::MockLossy,
            lossy: LossyConfig {
                fraction,
                inject_unsupported,
            },
            ..Default::default()
        }
    }

    pub fn rule(rule: Rule) -> Self {
        BackendConfig {
            kind: BackendKind::MockScripted,
            scripted: ScriptedConfig {
                script: None,
                rule: Some(rule),
            },
            ..Default::default()
        }
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: BackendConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        cfg.validate()?;
        Ok(cfg)
    }

    /// Makes relative script/log paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.scripted.script, &mut self.log_path].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_concurrency == 0 {
            return Err(Error::Config("max_concurrency must be >= 1".into()));
        }
        if self.retry.max_attempts == 0 {
            return Err(Error::Config("retry.max_attempts must be >= 1".into()));
        }
        match self.kind {
            BackendKind::HttpChat if self.endpoint.is_none() || self.model_name.is_none() => {
                Err(Error::Config("http_chat backend requires `endpoint` and `model_name`".into()))
            }
            BackendKind::MockLossy if !(0.0..=1.0).contains(&self.lossy.fraction) => {
                Err(Error::Config(format!("lossy fraction {} outside [0,1]", self.lossy.fraction)))
            }
            BackendKind::MockScripted if self.scripted.script.is_none() && self.scripted.rule.is_none() => {
                Err(Error::Config("mock_scripted backend requires `scripted.script` or `scripted.rule`".into()))
            }
            _ => Ok(()),
        }
    }

    /// Builds the backend and wraps it in a gateway.
    pub fn build(&self) -> Result<Gateway> {
        self.validate()?;
        let backend: Arc<dyn Backend> = match self.kind {
            BackendKind::HttpChat => Arc::new(HttpChatBackend::from_config(self)?),
            BackendKind::MockEcho => Arc::new(EchoBackend),
            BackendKind::MockLossy => Arc::new(LossyBackend::new(
                self.lossy.fraction,
                self.lossy.inject_unsupported,
            )),
            BackendKind::MockScripted => {
                let mut entries = Vec::new();
                if let Some(path) = &self.scripted.script {
                    entries = mock::read_script(path)?;
                }
                Arc::new(ScriptedBackend::new(entries, self.scripted.rule.clone()))
            }
        };
        let mut gw = Gateway::new(backend)
            .with_concurrency(self.max_concurrency)
            .with_retry(self.retry.clone());
        gw.defaults = RequestDefaults {
            temperature: self.temperature,
            top_p: self.top_p,
            seed: self.seed,
        };
        if let Some(path) = &self.log_path {
            gw = gw.with_log(path, self.redact_prompts)?;
        }
        Ok(gw)
    }
}

// ---------------------------------------------------------------------------
// gateway

#[derive(Debug, Clone, Default)]
struct RequestDefaults {
    temperature: Option<f64>,
    top_p: Option<f64>,
    seed: Option<u64>,
}

struct RequestLog {
    out: Mutex<BufWriter<File>>,
    redact: bool,
}

#[derive(Serialize)]
struct LogRecord<'a> {
    backend_tag: &'a str,
    fingerprint: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    system_prompt: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    user_prompt: Option<&'a str>,
    attempts: u32,
    latency_ms: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    text: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

/// Per-batch outcome, index-aligned with the input requests.
#[derive(Debug)]
pub struct BatchResult {
    pub outcomes: Vec<Result<GenerationResult>>,
}

impl BatchResult {
    pub fn failed_indices(&self) -> Vec<usize> {
        self.outcomes
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.is_err().then_some(i))
            .collect()
    }

    pub fn successes(&self) -> usize {
        self.outcomes.iter().filter(|r| r.is_ok()).count()
    }
}

#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn Backend>,
    retry: RetryPolicy,
    max_concurrency: usize,
    defaults: RequestDefaults,
    log: Option<Arc<RequestLog>>,
    sleep: fn(Duration),
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("backend", &self.backend.tag())
            .field("retry", &self.retry)
            .field("max_concurrency", &self.max_concurrency)
            .finish()
    }
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Gateway {
            backend,
            retry: RetryPolicy::default(),
            max_concurrency: 1,
            defaults: RequestDefaults::default(),
            log: None,
            sleep: std::thread::sleep,
        }
    }

    pub fn with_concurrency(mut self, n: usize) -> Self {
        self.max_concurrency = n.max(1);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Replaces the sleep used between retries.
    pub fn with_sleep(mut self, sleep: fn(Duration)) -> Self {
        self.sleep = sleep;
        self
    }

    pub fn with_log(mut self, path: &Path, redact: bool) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        self.log = Some(Arc::new(RequestLog {
            out: Mutex::new(BufWriter::new(file)),
            redact,
        }));
        Ok(self)
    }

    pub fn tag(&self) -> String {
        self.backend.tag()
    }

    pub fn max_concurrency(&self) -> usize {
        self.max_concurrency
    }

    fn apply_defaults(&self, request: &GenerationRequest) -> GenerationRequest {
        let mut r = request.clone();
        if let Some(t) = self.defaults.temperature {
            r.temperature = t;
        }
        if let Some(p) = self.defaults.top_p {
            r.top_p = p;
        }
        if r.seed.is_none() {
            r.seed = self.defaults.seed;
        }
        r
    }

    /// One request with retry on transient failures.
    pub fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult> {
        let request = self.apply_defaults(request);
        request.validate()?;
        let started = Instant::now();
        let mut delays = self.retry.delays();
        let mut attempts = 0;
        let outcome = loop {
            attempts += 1;
            match self.backend.call(&request) {
                Ok(reply) => break Ok(reply),
                Err(e) if e.is_transient() => match delays.next() {
                    Some(d) => {
                        log::debug!("transient failure on attempt {attempts}: {e}; retrying in {d:?}");
                        (self.sleep)(d);
                    }
                    None => {
                        break Err(Error::RetriesExhausted {
                            attempts,
                            last: e.to_string(),
                        })
                    }
                },
                Err(e) => break Err(e),
            }
        };
        let latency_ms = started.elapsed().as_millis() as u64;
        let tag = self.backend.tag();
        self.write_log(&request, &tag, attempts, latency_ms, &outcome);
        let reply = outcome?;
        let truncated = reply
            .hit_max_tokens
            .unwrap_or_else(|| estimate_tokens(&reply.text) as f64 >= 0.98 * request.max_tokens as f64);
        Ok(GenerationResult {
            text: reply.text,
            backend_tag: tag,
            latency_ms,
            truncated,
        })
    }

    /// Runs requests with at most `max_concurrency` in flight; output `i`
    /// belongs to input `i`.
    pub fn generate_batch(&self, requests: &[GenerationRequest]) -> BatchResult {
        let n = requests.len();
        let mut slots: Vec<Option<Result<GenerationResult>>> = (0..n).map(|_| None).collect();
        if n == 0 {
            return BatchResult { outcomes: vec![] };
        }
        let workers = self.max_concurrency.min(n);
        if workers == 1 {
            for (slot, req) in slots.iter_mut().zip(requests) {
                *slot = Some(self.generate(req));
            }
        } else {
            let next = AtomicUsize::new(0);
            let done: Mutex<Vec<(usize, Result<GenerationResult>)>> = Mutex::new(Vec::with_capacity(n));
            std::thread::scope(|scope| {
                for _ in 0..workers {
                    scope.spawn(|| loop {
                        let i = next.fetch_add(1, Ordering::SeqCst);
                        if i >= n {
                            break;
                        }
                        let r = self.generate(&requests[i]);
                        done.lock().expect("batch collector poisoned").push((i, r));
                    });
                }
            });
            for (i, r) in done.into_inner().expect("batch collector poisoned") {
                slots[i] = Some(r);
            }
        }
        BatchResult {
            outcomes: slots
                .into_iter()
                .map(|s| s.expect("every request slot is filled"))
                .collect(),
        }
    }

    fn write_log(
        &self,
        request: &GenerationRequest,
        tag: &str,
        attempts: u32,
        latency_ms: u64,
        outcome: &Result<RawReply>,
    ) {
        let Some(log) = &self.log else { return };
        let rec = LogRecord {
            backend_tag: tag,
            fingerprint: request.fingerprint(),
            system_prompt: (!log.redact).then_some(request.system_prompt.as_str()),
            user_prompt: (!log.redact).then_some(request.user_prompt.as_str()),
            attempts,
            latency_ms,
            text: outcome.as_ref().ok().map(|r| r.text.as_str()),
            error: outcome.as_ref().err().map(|e| e.to_string()),
        };
        let mut out = log.out.lock().expect("request log poisoned");
        let written = serde_json::to_writer(&mut *out, &rec)
            .map_err(|e| e.to_string())
            .and_then(|_| out.write_all(b"\n").map_err(|e| e.to_string()))
            .and_then(|_| out.flush().map_err(|e| e.to_string()));
        if let Err(e) = written {
            log::warn!("request log write failed: {e}");
        }
    }
}

/// Rough token count for backends that do not report a finish reason.
fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}
