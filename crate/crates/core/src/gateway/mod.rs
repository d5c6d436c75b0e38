//! Uniform client for chat-completion backends.

pub mod cache;
pub mod limiter;
pub mod transport;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::util::{parallel_map, sha256_hex};

pub use cache::{CacheEntry, ResponseCache};
pub use limiter::{Clock, ManualClock, RateLimiter, SystemClock};
pub use transport::{ChatRequest, HttpTransport, MockTransport, Transport, TransportError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GatewayError {
    #[error("environment variable {0} holding the API key is not set")]
    AuthMissing(String),
    #[error("rate limited after {attempts} attempts")]
    RateLimitedExhausted { attempts: u32 },
    #[error("backend returned status {status}: {body}")]
    BackendError { status: u16, body: String },
    #[error("network failure after {attempts} attempts: {message}")]
    Network { attempts: u32, message: String },
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("invalid backend config: {0}")]
    InvalidConfig(String),
    #[error("cache failure: {0}")]
    Cache(String),
}

fn default_max_retries() -> u32 {
    3
}
fn default_rpm() -> u32 {
    60
}
fn default_timeout() -> f64 {
    60.0
}
fn default_base_delay() -> u64 {
    500
}

/// Backend settings. API keys are read from the environment variable
/// named by `auth_env_var` and never stored here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub model_id: String,
    pub endpoint_url: String,
    #[serde(default)]
    pub auth_env_var: Option<String>,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_rpm")]
    pub requests_per_minute: u32,
    #[serde(default = "default_timeout")]
    pub timeout_seconds: f64,
    #[serde(default = "default_base_delay")]
    pub retry_base_delay_ms: u64,
    #[serde(default)]
    pub default_params: BTreeMap<String, Value>,
}

impl BackendConfig {
    pub fn new(model_id: impl Into<String>, endpoint_url: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            endpoint_url: endpoint_url.into(),
            auth_env_var: None,
            max_retries: default_max_retries(),
            requests_per_minute: default_rpm(),
            timeout_seconds: default_timeout(),
            retry_base_delay_ms: default_base_delay(),
            default_params: BTreeMap::new(),
        }
    }

    /// Checks invariants and pins `temperature` to 0 in the defaults.
    pub fn validated(mut self) -> Result<Self, GatewayError> {
        if self.requests_per_minute < 1 {
            return Err(GatewayError::InvalidConfig("requests_per_minute must be at least 1".into()));
        }
        if self.timeout_seconds.is_nan() || self.timeout_seconds <= 0.0 {
            return Err(GatewayError::InvalidConfig("timeout_seconds must be positive".into()));
        }
        match self.default_params.get("temperature") {
            None => {
                self.default_params.insert("temperature".into(), json!(0));
            }
            Some(t) if t.as_f64() == Some(0.0) => {}
            Some(t) => {
                return Err(GatewayError::InvalidConfig(format!(
                    "default temperature must be 0, got {t}; override per call instead"
                )))
            }
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawResponse {
    pub request_digest: String,
    pub text: String,
    pub latency_ms: u64,
    pub cached: bool,
    pub timestamp_ms: u64,
}

/// Digest of a request: SHA-256 over canonical JSON with sorted keys.
pub fn request_digest(model: &str, prompt: &str, params: &BTreeMap<String, Value>) -> String {
    let canonical = json!({ "model": model, "params": params, "prompt": prompt });
    sha256_hex(canonical.to_string().as_bytes())
}

/// Anything that turns a prompt into completion text.
pub trait Completer: Sync {
    fn model_id(&self) -> &str;
    fn complete_text(&self, prompt: &str) -> Result<String, GatewayError>;
}

pub struct LlmClient {
    config: BackendConfig,
    transport: Arc<dyn Transport>,
    clock: Arc<dyn Clock>,
    limiter: RateLimiter,
    cache: ResponseCache,
    network_calls: AtomicU64,
}

impl std::fmt::Debug for LlmClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LlmClient")
            .field("model_id", &self.config.model_id)
            .field("endpoint_url", &self.config.endpoint_url)
            .finish()
    }
}

impl LlmClient {
    /// Builds a client whose transport is chosen from the endpoint URL:
    /// `mock://...` selects an offline mock, anything else goes over HTTP.
    pub fn new(config: BackendConfig, cache: ResponseCache) -> Result<Self, GatewayError> {
        let transport: Arc<dyn Transport> = if config.endpoint_url.starts_with("mock://") {
            Arc::new(MockTransport::parse(&config.endpoint_url).ok_or_else(|| {
                GatewayError::InvalidConfig(format!("unknown mock backend {}", config.endpoint_url))
            })?)
        } else {
            Arc::new(HttpTransport::new(config.endpoint_url.clone()))
        };
        Self::with_parts(config, transport, Arc::new(SystemClock), cache)
    }

    pub fn with_parts(
        config: BackendConfig,
        transport: Arc<dyn Transport>,
        clock: Arc<dyn Clock>,
        cache: ResponseCache,
    ) -> Result<Self, GatewayError> {
        let config = config.validated()?;
        Ok(Self {
            limiter: RateLimiter::new(config.requests_per_minute),
            config,
            transport,
            clock,
            cache,
            network_calls: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    /// Number of requests that reached the transport.
    pub fn network_calls(&self) -> u64 {
        self.network_calls.load(Ordering::SeqCst)
    }

    pub fn complete(&self, prompt: &str) -> Result<RawResponse, GatewayError> {
        self.complete_with(prompt, &BTreeMap::new())
    }

    /// Like [`complete`](Self::complete) with per-call parameter overrides.
    pub fn complete_with(
        &self,
        prompt: &str,
        overrides: &BTreeMap<String, Value>,
    ) -> Result<RawResponse, GatewayError> {
        if prompt.is_empty() {
            return Err(GatewayError::EmptyPrompt);
        }
        let mut params = self.config.default_params.clone();
        params.extend(overrides.iter().map(|(k, v)| (k.clone(), v.clone())));
        let digest = request_digest(&self.config.model_id, prompt, &params);

        if let Some(hit) = self.cache.get(&digest) {
            log::debug!("cache hit {digest}");
            return Ok(RawResponse {
                request_digest: digest,
                text: hit.text,
                latency_ms: hit.latency_ms,
                cached: true,
                timestamp_ms: hit.timestamp_ms,
            });
        }

        let api_key = match &self.config.auth_env_var {
            Some(var) => Some(std::env::var(var).map_err(|_| GatewayError::AuthMissing(var.clone()))?),
            None => None,
        };
        let request = ChatRequest {
            model: self.config.model_id.clone(),
            prompt: prompt.to_string(),
            params,
        };
        let timeout = Duration::from_secs_f64(self.config.timeout_seconds);

        let mut attempt = 0u32;
        loop {
            let timestamp_ms = self.limiter.acquire(self.clock.as_ref());
            self.network_calls.fetch_add(1, Ordering::SeqCst);
            let started = Instant::now();
            match self.transport.send(&request, api_key.as_deref(), timeout) {
                Ok(text) => {
                    let entry = CacheEntry {
                        request_digest: digest.clone(),
                        model_id: self.config.model_id.clone(),
                        text,
                        latency_ms: started.elapsed().as_millis() as u64,
                        timestamp_ms,
                    };
                    self.cache.put(&entry)?;
                    return Ok(RawResponse {
                        request_digest: digest,
                        text: entry.text,
                        latency_ms: entry.latency_ms,
                        cached: false,
                        timestamp_ms,
                    });
                }
                Err(err) if err.is_transient() && attempt < self.config.max_retries => {
                    let delay = self.config.retry_base_delay_ms.saturating_mul(1 << attempt.min(20));
                    log::warn!(
                        "{}: transient failure ({err:?}), retry {} in {delay} ms",
                        self.config.model_id,
                        attempt + 1
                    );
                    self.clock.sleep(Duration::from_millis(delay));
                    attempt += 1;
                }
                Err(err) => {
                    let attempts = attempt + 1;
                    return Err(match err {
                        TransportError::Status { status: 429, .. } => {
                            GatewayError::RateLimitedExhausted { attempts }
                        }
                        TransportError::Status { status, body } => GatewayError::BackendError { status, body },
                        TransportError::Network(message) => GatewayError::Network { attempts, message },
                    });
                }
            }
        }
    }

    /// Completes every prompt with at most `max_in_flight` concurrent
    /// requests. Results align index-for-index with `prompts`.
    pub fn batch_complete(
        &self,
        prompts: &[String],
        max_in_flight: usize,
    ) -> Vec<Result<RawResponse, GatewayError>> {
        parallel_map(prompts, max_in_flight.max(1), |p| self.complete(p))
    }
}

impl Completer for LlmClient {
    fn model_id(&self) -> &str {
        &self.config.model_id
    }

    fn complete_text(&self, prompt: &str) -> Result<String, GatewayError> {
        self.complete(prompt).map(|r| r.text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn temperature_pinned_to_zero() {
        let c = BackendConfig::new("m", "mock://echo").validated().unwrap();
        assert_eq!(c.default_params["temperature"], json!(0));
        let mut bad = BackendConfig::new("m", "mock://echo");
        bad.default_params.insert("temperature".into(), json!(0.7));
        assert!(matches!(bad.validated(), Err(GatewayError::InvalidConfig(_))));
        let mut zero_rpm = BackendConfig::new("m", "mock://echo");
        zero_rpm.requests_per_minute = 0;
        assert!(zero_rpm.validated().is_err());
    }

    #[test]
    fn digest_depends_on_every_component() {
        let p = BTreeMap::new();
        let base = request_digest("m", "x", &p);
        assert_eq!(base, request_digest("m", "x", &p));
        assert_ne!(base, request_digest("n", "x", &p));
        assert_ne!(base, request_digest("m", "y", &p));
        let q: BTreeMap<_, _> = [("temperature".to_string(), json!(0))].into_iter().collect();
        assert_ne!(base, request_digest("m", "x", &q));
    }

    #[test]
    fn config_parses_from_toml() {
        let c: BackendConfig = toml::from_str(
            r#"
            model_id = "gpt-3.5-turbo-0613"
            endpoint_url = "https://example.invalid/v1/chat/completions"
            auth_env_var = "OPENAI_API_KEY"
            requests_per_minute = 30
            "#,
        )
        .unwrap();
        assert_eq!(c.max_retries, 3);
        assert_eq!(c.requests_per_minute, 30);
        assert_eq!(c.auth_env_var.as_deref(), Some("OPENAI_API_KEY"));
    }
}
