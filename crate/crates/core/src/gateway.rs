//! Model backends: live HTTP providers, a persistent response cache and a
//! deterministic replay mode.
//!
//! Every prompt is keyed by a SHA-256 digest over `model_name \n temperature
//! \n prompt`. The cache file is line-delimited JSON [`Exchange`] records and
//! doubles as the replay fixture format.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::sha256_hex;
use crate::prompt::RenderedPrompt;

#[derive(Debug, Clone, Error, PartialEq, Eq, Serialize, Deserialize)]
pub enum GatewayError {
    #[error("rate limited by provider after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("request timed out after {attempts} attempts")]
    Timeout { attempts: u32 },
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("authentication failed: {0}")]
    AuthFailure(String),
    #[error("no cached response for digest {digest}")]
    ReplayMiss { digest: String },
    #[error("missing credentials: set {0}")]
    MissingCredentials(String),
    #[error("malformed provider response: {0}")]
    BadResponse(String),
    #[error("cache: {0}")]
    Cache(String),
    #[error("invalid backend config: {0}")]
    InvalidConfig(String),
}

impl GatewayError {
    /// Only transport-level failures are retried.
    fn is_retryable(&self) -> bool {
        matches!(
            self,
            GatewayError::RateLimited { .. } | GatewayError::Timeout { .. } | GatewayError::Transport(_)
        )
    }

    fn with_attempts(self, attempts: u32) -> Self {
        match self {
            GatewayError::RateLimited { .. } => GatewayError::RateLimited { attempts },
            GatewayError::Timeout { .. } => GatewayError::Timeout { attempts },
            other => other,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendMode {
    Live,
    #[default]
    Replay,
    LiveWithCache,
}

fn default_retries() -> u32 {
    3
}
fn default_rpm() -> u32 {
    60
}
fn default_concurrency() -> usize {
    4
}
fn default_timeout() -> u64 {
    60
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub provider_id: String,
    pub model_name: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_rpm")]
    pub requests_per_minute: u32,
    #[serde(default)]
    pub cache_path: Option<PathBuf>,
    #[serde(default)]
    pub mode: BackendMode,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
    /// Base URL of an OpenAI-compatible endpoint, for live modes.
    #[serde(default)]
    pub base_url: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

impl BackendConfig {
    pub fn replay(model_name: impl Into<String>, cache_path: impl Into<PathBuf>) -> Self {
        BackendConfig {
            provider_id: "replay".into(),
            model_name: model_name.into(),
            temperature: 0.0,
            max_retries: default_retries(),
            requests_per_minute: default_rpm(),
            cache_path: Some(cache_path.into()),
            mode: BackendMode::Replay,
            max_concurrency: default_concurrency(),
            base_url: None,
            timeout_secs: default_timeout(),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: &str| Err(GatewayError::InvalidConfig(m.to_string()));
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return bad("temperature must be a finite number >= 0");
        }
        if self.mode == BackendMode::Replay && self.cache_path.is_none() {
            return bad("replay mode requires cache_path");
        }
        if self.model_name.is_empty() {
            return bad("model_name is empty");
        }
        if self.requests_per_minute == 0 {
            return bad("requests_per_minute must be positive");
        }
        if self.max_concurrency == 0 {
            return bad("max_concurrency must be positive");
        }
        Ok(())
    }

    /// Environment variable holding the provider's API key.
    pub fn credential_var(&self) -> String {
        let id: String = self
            .provider_id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_uppercase() } else { '_' })
            .collect();
        format!("CPL_API_KEY_{id}")
    }

    pub fn digest(&self, prompt: &str) -> String {
        digest(&self.model_name, self.temperature, prompt)
    }
}

/// Cache key for one prompt under one model configuration.
pub fn digest(model_name: &str, temperature: f64, prompt: &str) -> String {
    sha256_hex(format!("{model_name}\n{temperature}\n{prompt}"))
}

/// One recorded request/response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exchange {
    /// May be left empty in hand-written fixtures; it is then derived from
    /// the prompt text and the loading backend's model settings.
    #[serde(default)]
    pub prompt_digest: String,
    pub prompt_text: String,
    pub response_text: String,
    #[serde(default)]
    pub latency_ms: u64,
    /// Unix time in milliseconds.
    #[serde(default)]
    pub timestamp: u64,
}

/// Digest-indexed response store backed by an append-only JSONL file.
#[derive(Debug, Default)]
pub struct ResponseCache {
    entries: RwLock<HashMap<String, Exchange>>,
    writer: Mutex<Option<File>>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Loads every record in `path`. Records without a digest get one from
    /// `model_name`/`temperature`. The first record for a digest wins.
    pub fn load(path: &Path, model_name: &str, temperature: f64) -> Result<Self, GatewayError> {
        let file = File::open(path).map_err(|e| GatewayError::Cache(format!("{}: {e}", path.display())))?;
        let cache = Self::default();
        {
            let mut entries = cache.entries.write().expect("cache lock");
            for (n, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| GatewayError::Cache(format!("{}: {e}", path.display())))?;
                if line.trim().is_empty() {
                    continue;
                }
                let mut ex: Exchange = serde_json::from_str(&line)
                    .map_err(|e| GatewayError::Cache(format!("{}:{}: {e}", path.display(), n + 1)))?;
                if ex.prompt_digest.is_empty() {
                    ex.prompt_digest = digest(model_name, temperature, &ex.prompt_text);
                }
                entries.entry(ex.prompt_digest.clone()).or_insert(ex);
            }
        }
        Ok(cache)
    }

    /// Like [`load`](Self::load), but a missing file yields an empty cache,
    /// and new exchanges are appended to `path`.
    pub fn open_append(path: &Path, model_name: &str, temperature: f64) -> Result<Self, GatewayError> {
        let cache = if path.exists() {
            Self::load(path, model_name, temperature)?
        } else {
            Self::default()
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| GatewayError::Cache(e.to_string()))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| GatewayError::Cache(format!("{}: {e}", path.display())))?;
        *cache.writer.lock().expect("cache writer") = Some(file);
        Ok(cache)
    }

    pub fn get(&self, digest: &str) -> Option<Exchange> {
        self.entries.read().expect("cache lock").get(digest).cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Persists (if file-backed) and indexes an exchange. Writers are serialized.
    pub fn insert(&self, exchange: Exchange) -> Result<(), GatewayError> {
        let mut writer = self.writer.lock().expect("cache writer");
        if let Some(file) = writer.as_mut() {
            let mut line = serde_json::to_string(&exchange).map_err(|e| GatewayError::Cache(e.to_string()))?;
            line.push('\n');
            file.write_all(line.as_bytes())
                .and_then(|_| file.flush())
                .map_err(|e| GatewayError::Cache(e.to_string()))?;
        }
        self.entries
            .write()
            .expect("cache lock")
            .entry(exchange.prompt_digest.clone())
            .or_insert(exchange);
        Ok(())
    }
}

/// Writes exchanges as a fixture file, one JSON object per line.
pub fn write_fixture(path: &Path, exchanges: &[Exchange]) -> std::io::Result<()> {
    let mut out = String::new();
    for ex in exchanges {
        out.push_str(&serde_json::to_string(ex).expect("exchanges serialize"));
        out.push('\n');
    }
    std::fs::write(path, out)
}

/// Narrow provider interface: text in, text out.
pub trait Provider: Send + Sync {
    fn send(&self, prompt: &str, cfg: &BackendConfig) -> Result<String, GatewayError>;
}

/// Time source used for rate limiting and backoff.
pub trait Clock: Send + Sync {
    /// Time elapsed since the clock's origin.
    fn now(&self) -> Duration;
    fn sleep(&self, d: Duration);
}

#[derive(Debug)]
pub struct SystemClock {
    origin: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        SystemClock { origin: Instant::now() }
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Virtual clock; `sleep` advances time instantly.
#[derive(Debug, Default)]
pub struct ManualClock {
    now: Mutex<Duration>,
}

impl ManualClock {
    pub fn advance(&self, d: Duration) {
        *self.now.lock().expect("clock") += d;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Duration {
        *self.now.lock().expect("clock")
    }

    fn sleep(&self, d: Duration) {
        let mut now = self.now.lock().expect("clock");
        *now += d;
    }
}

/// Spaces requests at least `60 / rpm` seconds apart. Slots are reserved
/// under a lock, so concurrent callers queue rather than burst.
#[derive(Debug)]
pub struct RateLimiter {
    interval: Duration,
    next_slot: Mutex<Option<Duration>>,
}

impl RateLimiter {
    pub fn per_minute(rpm: u32) -> Self {
        RateLimiter {
            interval: Duration::from_secs_f64(60.0 / rpm.max(1) as f64),
            next_slot: Mutex::new(None),
        }
    }

    pub fn acquire(&self, clock: &dyn Clock) {
        let wait = {
            let mut next = self.next_slot.lock().expect("limiter");
            let now = clock.now();
            let slot = next.map_or(now, |n| n.max(now));
            *next = Some(slot + self.interval);
            slot - now
        };
        if !wait.is_zero() {
            clock.sleep(wait);
        }
    }
}

const BACKOFF_BASE: Duration = Duration::from_secs(1);
const BACKOFF_CAP: Duration = Duration::from_secs(60);

/// Delay before retry number `attempt` (0-based): 1 s, 2 s, 4 s, ... capped at 60 s.
pub fn backoff_delay(attempt: u32) -> Duration {
    BACKOFF_BASE.saturating_mul(1u32 << attempt.min(16)).min(BACKOFF_CAP)
}

/// Routes prompts to the cache and/or a provider according to the backend mode.
pub struct Gateway {
    cfg: BackendConfig,
    cache: ResponseCache,
    provider: Option<Arc<dyn Provider>>,
    clock: Arc<dyn Clock>,
    limiter: RateLimiter,
    exchanges: Mutex<Vec<Exchange>>,
    network_calls: AtomicU64,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("cfg", &self.cfg)
            .field("cached", &self.cache.len())
            .field("network_calls", &self.network_calls())
            .finish()
    }
}

impl Gateway {
    /// Builds a gateway with the stock HTTP provider for live modes.
    pub fn from_config(cfg: BackendConfig) -> Result<Self, GatewayError> {
        let provider: Option<Arc<dyn Provider>> = match cfg.mode {
            BackendMode::Replay => None,
            BackendMode::Live | BackendMode::LiveWithCache => Some(Arc::new(HttpProvider::from_env(&cfg)?)),
        };
        Self::with_parts(cfg, provider, Arc::new(SystemClock::default()))
    }

    pub fn with_parts(cfg: BackendConfig, provider: Option<Arc<dyn Provider>>, clock: Arc<dyn Clock>) -> Result<Self, GatewayError> {
        cfg.validate()?;
        let cache = match (cfg.mode, &cfg.cache_path) {
            (BackendMode::Replay, Some(path)) => ResponseCache::load(path, &cfg.model_name, cfg.temperature)?,
            (BackendMode::LiveWithCache, Some(path)) => ResponseCache::open_append(path, &cfg.model_name, cfg.temperature)?,
            _ => ResponseCache::in_memory(),
        };
        if cfg.mode != BackendMode::Replay && provider.is_none() {
            return Err(GatewayError::InvalidConfig("live modes need a provider".into()));
        }
        Ok(Gateway {
            limiter: RateLimiter::per_minute(cfg.requests_per_minute),
            cfg,
            cache,
            provider,
            clock,
            exchanges: Mutex::new(Vec::new()),
            network_calls: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.cfg
    }

    /// Exchanges produced by provider calls during this gateway's lifetime.
    pub fn exchanges(&self) -> Vec<Exchange> {
        self.exchanges.lock().expect("exchange log").clone()
    }

    /// Provider requests issued, including retries.
    pub fn network_calls(&self) -> u64 {
        self.network_calls.load(Ordering::Relaxed)
    }

    pub fn complete(&self, prompt: &RenderedPrompt) -> Result<String, GatewayError> {
        self.complete_text(&prompt.text)
    }

    pub fn complete_text(&self, prompt: &str) -> Result<String, GatewayError> {
        let digest = self.cfg.digest(prompt);
        match self.cfg.mode {
            BackendMode::Replay => self
                .cache
                .get(&digest)
                .map(|ex| ex.response_text)
                .ok_or(GatewayError::ReplayMiss { digest }),
            BackendMode::LiveWithCache => {
                if let Some(ex) = self.cache.get(&digest) {
                    return Ok(ex.response_text);
                }
                let ex = self.call_provider(prompt, digest)?;
                self.cache.insert(ex.clone())?;
                Ok(ex.response_text)
            }
            BackendMode::Live => self.call_provider(prompt, digest).map(|ex| ex.response_text),
        }
    }

    fn call_provider(&self, prompt: &str, digest: String) -> Result<Exchange, GatewayError> {
        let provider = self.provider.as_ref().expect("live gateway has a provider");
        let mut attempt = 0;
        loop {
            self.limiter.acquire(self.clock.as_ref());
            self.network_calls.fetch_add(1, Ordering::Relaxed);
            let started = self.clock.now();
            match provider.send(prompt, &self.cfg) {
                Ok(response) => {
                    let ex = Exchange {
                        prompt_digest: digest,
                        prompt_text: prompt.to_string(),
                        response_text: response,
                        latency_ms: self.clock.now().saturating_sub(started).as_millis() as u64,
                        timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64),
                    };
                    self.exchanges.lock().expect("exchange log").push(ex.clone());
                    return Ok(ex);
                }
                Err(e) if e.is_retryable() && attempt < self.cfg.max_retries => {
                    log::warn!("attempt {} failed ({e}); backing off", attempt + 1);
                    self.clock.sleep(backoff_delay(attempt));
                    attempt += 1;
                }
                Err(e) => return Err(e.with_attempts(attempt + 1)),
            }
        }
    }

    /// Completes every prompt, preserving input order. Failures stay in
    /// their own slot. Work is spread over at most `max_concurrency` threads.
    pub fn complete_batch(&self, prompts: &[RenderedPrompt]) -> Vec<Result<String, GatewayError>> {
        let texts: Vec<&str> = prompts.iter().map(|p| p.text.as_str()).collect();
        self.complete_texts(&texts)
    }

    pub fn complete_texts(&self, prompts: &[&str]) -> Vec<Result<String, GatewayError>> {
        let workers = self.cfg.max_concurrency.min(prompts.len());
        if workers <= 1 || self.cfg.mode == BackendMode::Replay {
            return prompts.iter().map(|p| self.complete_text(p)).collect();
        }
        let next = AtomicUsize::new(0);
        let mut slots: Vec<Option<Result<String, GatewayError>>> = vec![None; prompts.len()];
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|_| {
                    s.spawn(|| {
                        let mut done = Vec::new();
                        loop {
                            let i = next.fetch_add(1, Ordering::Relaxed);
                            if i >= prompts.len() {
                                break done;
                            }
                            done.push((i, self.complete_text(prompts[i])));
                        }
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("batch worker panicked") {
                    slots[i] = Some(r);
                }
            }
        });
        slots.into_iter().map(|s| s.expect("every slot filled")).collect()
    }
}

/// OpenAI-compatible chat-completions adapter. The prompt is sent as a single
/// user message; nothing else is modelled.
pub struct HttpProvider {
    client: reqwest::blocking::Client,
    endpoint: String,
    api_key: String,
}

const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";

impl HttpProvider {
    pub fn from_env(cfg: &BackendConfig) -> Result<Self, GatewayError> {
        let var = cfg.credential_var();
        let api_key = std::env::var(&var).map_err(|_| GatewayError::MissingCredentials(var))?;
        Self::new(cfg, api_key)
    }

    pub fn new(cfg: &BackendConfig, api_key: String) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        let base = cfg.base_url.as_deref().unwrap_or(DEFAULT_BASE_URL).trim_end_matches('/');
        Ok(HttpProvider {
            client,
            endpoint: format!("{base}/chat/completions"),
            api_key,
        })
    }
}

impl Provider for HttpProvider {
    fn send(&self, prompt: &str, cfg: &BackendConfig) -> Result<String, GatewayError> {
        let body = serde_json::json!({
            "model": cfg.model_name,
            "temperature": cfg.temperature,
            "messages": [{"role": "user", "content": prompt}],
        });
        let resp = self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .map_err(|e| {
                if e.is_timeout() {
                    GatewayError::Timeout { attempts: 1 }
                } else {
                    GatewayError::Transport(e.to_string())
                }
            })?;
        let status = resp.status();
        match status.as_u16() {
            401 | 403 => return Err(GatewayError::AuthFailure(status.to_string())),
            429 => return Err(GatewayError::RateLimited { attempts: 1 }),
            408 | 504 => return Err(GatewayError::Timeout { attempts: 1 }),
            s if s >= 500 => return Err(GatewayError::Transport(status.to_string())),
            s if s >= 400 => return Err(GatewayError::BadResponse(status.to_string())),
            _ => {}
        }
        let value: serde_json::Value = resp.json().map_err(|e| GatewayError::BadResponse(e.to_string()))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| GatewayError::BadResponse("no choices[0].message.content".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::VecDeque;

    /// Echoes the prompt, or plays back a scripted sequence of outcomes.
    struct Scripted {
        script: Mutex<VecDeque<Result<String, GatewayError>>>,
        calls: AtomicU64,
    }

    impl Scripted {
        fn echo() -> Arc<Self> {
            Self::new(vec![])
        }
        fn new(script: Vec<Result<String, GatewayError>>) -> Arc<Self> {
            Arc::new(Scripted {
                script: Mutex::new(script.into()),
                calls: AtomicU64::new(0),
            })
        }
    }

    impl Provider for Scripted {
        fn send(&self, prompt: &str, _: &BackendConfig) -> Result<String, GatewayError> {
            self.calls.fetch_add(1, Ordering::Relaxed);
            self.script.lock().unwrap().pop_front().unwrap_or_else(|| Ok(format!("echo:{prompt}")))
        }
    }

    fn live_cfg(mode: BackendMode, cache: Option<PathBuf>) -> BackendConfig {
        BackendConfig {
            provider_id: "test".into(),
            mode,
            cache_path: cache,
            requests_per_minute: 60,
            ..BackendConfig::replay("m", "unused")
        }
    }

    fn fixture(dir: &Path, prompts: &[(&str, &str)]) -> PathBuf {
        let path = dir.join("fixture.jsonl");
        let ex: Vec<_> = prompts
            .iter()
            .map(|(p, r)| Exchange {
                prompt_digest: digest("m", 0.0, p),
                prompt_text: p.to_string(),
                response_text: r.to_string(),
                latency_ms: 0,
                timestamp: 0,
            })
            .collect();
        write_fixture(&path, &ex).unwrap();
        path
    }

    #[test]
    fn digest_covers_model_and_temperature() {
        assert_eq!(digest("m", 0.0, "p"), sha256_hex("m\n0\np"));
        assert_ne!(digest("m", 0.0, "p"), digest("n", 0.0, "p"));
        assert_ne!(digest("m", 0.0, "p"), digest("m", 0.7, "p"));
        assert_eq!(digest("m", 0.7, "p"), sha256_hex("m\n0.7\np"));
    }

    #[test]
    fn replay_hit_and_miss() {
        let dir = tempfile::tempdir().unwrap();
        let path = fixture(dir.path(), &[("hello", " Yes.\n")]);
        let gw = Gateway::with_parts(BackendConfig::replay("m", path), None, Arc::new(ManualClock::default())).unwrap();
        assert_eq!(gw.complete_text("hello").unwrap(), " Yes.\n");
        let err = gw.complete_text("other").unwrap_err();
        assert_eq!(err, GatewayError::ReplayMiss { digest: digest("m", 0.0, "other") });
        assert_eq!(gw.network_calls(), 0);
    }

    #[test]
    fn hand_written_fixture_without_digest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.jsonl");
        std::fs::write(&path, "{\"prompt_text\":\"q\",\"response_text\":\"No\"}\n\n").unwrap();
        let gw = Gateway::with_parts(BackendConfig::replay("m", &path), None, Arc::new(ManualClock::default())).unwrap();
        assert_eq!(gw.complete_text("q").unwrap(), "No");
    }

    #[test]
    fn config_validation() {
        let mut cfg = BackendConfig::replay("m", "x");
        cfg.cache_path = None;
        assert!(matches!(cfg.validate(), Err(GatewayError::InvalidConfig(_))));
        let mut cfg = BackendConfig::replay("m", "x");
        cfg.temperature = -0.1;
        assert!(cfg.validate().is_err());
        cfg.temperature = f64::NAN;
        assert!(cfg.validate().is_err());
        let cfg = BackendConfig {
            provider_id: "open-ai".into(),
            ..BackendConfig::replay("m", "x")
        };
        assert_eq!(cfg.credential_var(), "CPL_API_KEY_OPEN_AI");
    }

    #[test]
    fn cache_hit_adds_no_exchange() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let provider = Scripted::echo();
        let gw = Gateway::with_parts(
            live_cfg(BackendMode::LiveWithCache, Some(path.clone())),
            Some(provider.clone()),
            Arc::new(ManualClock::default()),
        )
        .unwrap();
        assert_eq!(gw.complete_text("p").unwrap(), "echo:p");
        assert_eq!(gw.exchanges().len(), 1);
        assert_eq!(gw.complete_text("p").unwrap(), "echo:p");
        assert_eq!(gw.exchanges().len(), 1);
        assert_eq!(provider.calls.load(Ordering::Relaxed), 1);

        // The persisted cache replays the same bytes.
        let replay = Gateway::with_parts(BackendConfig::replay("m", path), None, Arc::new(ManualClock::default())).unwrap();
        assert_eq!(replay.complete_text("p").unwrap(), "echo:p");
    }

    #[test]
    fn retries_transport_failures_with_backoff() {
        let clock = Arc::new(ManualClock::default());
        let provider = Scripted::new(vec![
            Err(GatewayError::RateLimited { attempts: 1 }),
            Err(GatewayError::Timeout { attempts: 1 }),
            Ok("Yes".into()),
        ]);
        let gw = Gateway::with_parts(live_cfg(BackendMode::Live, None), Some(provider.clone()), clock.clone()).unwrap();
        assert_eq!(gw.complete_text("p").unwrap(), "Yes");
        assert_eq!(gw.network_calls(), 3);
        // Backoff of 1 s then 2 s; rate-limit slots at 0, 1 s and 3 s (the
        // third slot is already free after the backoff).
        assert_eq!(clock.now(), Duration::from_secs(3));
    }

    #[test]
    fn rate_limit_surfaces_after_max_retries() {
        let provider = Scripted::new((0..10).map(|_| Err(GatewayError::RateLimited { attempts: 1 })).collect());
        let mut cfg = live_cfg(BackendMode::Live, None);
        cfg.max_retries = 2;
        let gw = Gateway::with_parts(cfg, Some(provider), Arc::new(ManualClock::default())).unwrap();
        assert_eq!(gw.complete_text("p").unwrap_err(), GatewayError::RateLimited { attempts: 3 });
        assert_eq!(gw.network_calls(), 3);
    }

    #[test]
    fn auth_failure_is_not_retried() {
        let provider = Scripted::new(vec![Err(GatewayError::AuthFailure("401".into()))]);
        let gw = Gateway::with_parts(live_cfg(BackendMode::Live, None), Some(provider), Arc::new(ManualClock::default())).unwrap();
        assert!(matches!(gw.complete_text("p"), Err(GatewayError::AuthFailure(_))));
        assert_eq!(gw.network_calls(), 1);
    }

    #[test]
    fn backoff_schedule() {
        let d: Vec<u64> = (0..8).map(|a| backoff_delay(a).as_secs()).collect();
        assert_eq!(d, vec![1, 2, 4, 8, 16, 32, 60, 60]);
        assert_eq!(backoff_delay(40), BACKOFF_CAP);
    }

    #[test]
    fn batch_preserves_order_and_isolates_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = fixture(dir.path(), &[("a", "1"), ("b", "2"), ("c", "3")]);
        let gw = Gateway::with_parts(BackendConfig::replay("m", path), None, Arc::new(ManualClock::default())).unwrap();
        let got = gw.complete_texts(&["c", "a", "b"]);
        assert_eq!(got.into_iter().map(Result::unwrap).collect::<Vec<_>>(), vec!["3", "1", "2"]);
        let got = gw.complete_texts(&["a", "zzz", "c"]);
        assert!(got[0].is_ok() && got[2].is_ok());
        assert!(matches!(got[1], Err(GatewayError::ReplayMiss { .. })));
    }

    #[test]
    fn concurrent_batch_preserves_order() {
        let mut cfg = live_cfg(BackendMode::Live, None);
        cfg.max_concurrency = 8;
        cfg.requests_per_minute = 6_000_000;
        let gw = Gateway::with_parts(cfg, Some(Scripted::echo()), Arc::new(SystemClock::default())).unwrap();
        let prompts: Vec<String> = (0..100).map(|i| format!("p{i}")).collect();
        let refs: Vec<&str> = prompts.iter().map(String::as_str).collect();
        let got = gw.complete_texts(&refs);
        for (i, r) in got.into_iter().enumerate() {
            assert_eq!(r.unwrap(), format!("echo:p{i}"));
        }
    }

    #[test]
    fn rate_limiter_honours_rpm() {
        let clock = Arc::new(ManualClock::default());
        let gw = Gateway::with_parts(live_cfg(BackendMode::Live, None), Some(Scripted::echo()), clock.clone()).unwrap();
        let prompts: Vec<String> = (0..1000).map(|i| i.to_string()).collect();
        let refs: Vec<&str> = prompts.iter().map(String::as_str).collect();
        let got = gw.complete_texts(&refs);
        assert!(got.iter().all(Result::is_ok));
        // 1000 requests at one per second: the last starts at t = 999 s.
        assert!(clock.now() >= Duration::from_secs(999), "{:?}", clock.now());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn cache_round_trip(entries in prop::collection::vec(("\\PC{0,40}", "\\PC{0,80}"), 1..10)) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("c.jsonl");
            {
                let cache = ResponseCache::open_append(&path, "m", 0.0).unwrap();
                for (p, r) in &entries {
                    cache.insert(Exchange {
                        prompt_digest: digest("m", 0.0, p),
                        prompt_text: p.clone(),
                        response_text: r.clone(),
                        latency_ms: 5,
                        timestamp: 1,
                    }).unwrap();
                }
            }
            let loaded = ResponseCache::load(&path, "m", 0.0).unwrap();
            let mut first = HashMap::new();
            for (p, r) in &entries {
                first.entry(p.clone()).or_insert(r.clone());
            }
            for (p, r) in &first {
                prop_assert_eq!(&loaded.get(&digest("m", 0.0, p)).unwrap().response_text, r);
            }
        }
    }
}
