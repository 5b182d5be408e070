//! Provider-agnostic chat-completion client with retries, a concurrency
//! gate, and a content-addressed disk cache.

mod cache;
pub mod mock;
mod provider;

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{cache_key, sha256_hex, CacheEntry, ResponseCache};
pub use provider::Provider;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("request failed after {} attempt(s): {}", attempts.len(), attempts.join("; "))]
    Exhausted { attempts: Vec<String> },

    #[error("authentication rejected (HTTP {status})")]
    Auth { status: u16 },

    #[error("request rejected (HTTP {status}): {body}")]
    Rejected { status: u16, body: String },

    #[error("cache miss for key {key} while offline")]
    Offline { key: String },

    #[error("invalid endpoint configuration: {0}")]
    Config(String),

    #[error("cache i/o: {0}")]
    Cache(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmEndpointConfig {
    pub provider: Provider,
    pub base_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: Option<String>,
    /// `None` omits the parameter and uses the endpoint default.
    pub temperature: Option<f64>,
    pub max_retries: u32,
    pub timeout_secs: f64,
    pub max_concurrency: usize,
    pub backoff_base_ms: u64,
}

impl Default for LlmEndpointConfig {
    fn default() -> Self {
        LlmEndpointConfig {
            provider: Provider::OpenAiCompatible,
            base_url: "http://127.0.0.1:8080/v1".into(),
            model_name: "gpt-4o-mini".into(),
            api_key_env: None,
            temperature: Some(0.0),
            max_retries: 3,
            timeout_secs: 120.0,
            max_concurrency: 4,
            backoff_base_ms: 500,
        }
    }
}

impl LlmEndpointConfig {
    pub fn validate(&self) -> Result<(), LlmError> {
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(LlmError::Config("timeout_secs must be positive".into()));
        }
        if self.max_concurrency == 0 {
            return Err(LlmError::Config("max_concurrency must be at least 1".into()));
        }
        if self.model_name.is_empty() {
            return Err(LlmError::Config("model_name is empty".into()));
        }
        if let Some(t) = self.temperature {
            if !t.is_finite() || t < 0.0 {
                return Err(LlmError::Config("temperature must be finite and >= 0".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub from_cache: bool,
    pub cache_key: String,
    pub prompt_sha256: String,
}

/// Counting semaphore bounding in-flight requests.
struct Gate {
    in_use: Mutex<usize>,
    freed: Condvar,
    limit: usize,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(limit: usize) -> Self {
        Gate {
            in_use: Mutex::new(0),
            freed: Condvar::new(),
            limit,
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_use.lock().unwrap_or_else(|p| p.into_inner());
        while *n >= self.limit {
            n = self.freed.wait(n).unwrap_or_else(|p| p.into_inner());
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.in_use.lock().unwrap_or_else(|p| p.into_inner());
        *n -= 1;
        self.0.freed.notify_one();
    }
}

enum AttemptError {
    Retryable(String),
    Fatal(LlmError),
    TemperatureRejected,
}

pub struct LlmClient {
    config: LlmEndpointConfig,
    http: reqwest::blocking::Client,
    api_key: Option<String>,
    cache: Option<ResponseCache>,
    offline: bool,
    gate: Gate,
    requests_sent: AtomicUsize,
    temperature_rejected: AtomicBool,
}

impl LlmClient {
    pub fn new(config: LlmEndpointConfig, cache: Option<ResponseCache>) -> Result<Self, LlmError> {
        config.validate()?;
        let api_key = match &config.api_key_env {
            Some(var) => match std::env::var(var) {
                Ok(v) if !v.is_empty() => Some(v),
                _ => {
                    log::warn!("environment variable {var} is unset; sending requests without credentials");
                    None
                }
            },
            None => None,
        };
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| LlmError::Config(format!("http client: {e}")))?;
        Ok(LlmClient {
            gate: Gate::new(config.max_concurrency),
            config,
            http,
            api_key,
            cache,
            offline: false,
            requests_sent: AtomicUsize::new(0),
            temperature_rejected: AtomicBool::new(false),
        })
    }

    /// Serve only from the cache; a miss is an error and nothing touches the
    /// network.
    pub fn offline(mut self) -> Self {
        self.offline = true;
        self
    }

    pub fn config(&self) -> &LlmEndpointConfig {
        &self.config
    }

    /// HTTP requests issued so far (cache hits excluded).
    pub fn network_requests(&self) -> usize {
        self.requests_sent.load(Ordering::SeqCst)
    }

    pub fn complete(&self, prompt: &str) -> Result<Completion, LlmError> {
        self.complete_validated(prompt, |_| Ok(()))
    }

    /// Like [`complete`](Self::complete), but a response that fails
    /// `validate` counts as a failed attempt and is never cached.
    pub fn complete_validated<F>(&self, prompt: &str, validate: F) -> Result<Completion, LlmError>
    where
        F: Fn(&str) -> Result<(), String>,
    {
        let key = cache_key(&self.config.model_name, prompt, self.config.temperature);
        let prompt_sha256 = sha256_hex(prompt.as_bytes());
        if let Some(cache) = &self.cache {
            if let Some(entry) = cache.get(&key)? {
                if validate(&entry.response).is_ok() {
                    return Ok(Completion {
                        text: entry.response,
                        from_cache: true,
                        cache_key: key,
                        prompt_sha256,
                    });
                }
            }
        }
        if self.offline {
            return Err(LlmError::Offline { key });
        }

        let mut attempts = Vec::new();
        let mut attempt = 0u32;
        while attempt <= self.config.max_retries {
            if attempt > 0 {
                let delay = self.config.backoff_base_ms.saturating_mul(1 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(delay));
            }
            match self.send_once(prompt) {
                Ok(text) => match validate(&text) {
                    Ok(()) => {
                        if let Some(cache) = &self.cache {
                            cache.put(&CacheEntry {
                                key: key.clone(),
                                model: self.config.model_name.clone(),
                                temperature: self.config.temperature,
                                prompt_sha256: prompt_sha256.clone(),
                                response: text.clone(),
                            })?;
                        }
                        return Ok(Completion {
                            text,
                            from_cache: false,
                            cache_key: key,
                            prompt_sha256,
                        });
                    }
                    Err(why) => attempts.push(format!("attempt {}: invalid response: {why}", attempt + 1)),
                },
                Err(AttemptError::TemperatureRejected) => {
                    log::info!("endpoint rejected the temperature parameter; using its default configuration");
                    self.temperature_rejected.store(true, Ordering::SeqCst);
                    continue;
                }
                Err(AttemptError::Retryable(why)) => attempts.push(format!("attempt {}: {why}", attempt + 1)),
                Err(AttemptError::Fatal(e)) => return Err(e),
            }
            attempt += 1;
        }
        Err(LlmError::Exhausted { attempts })
    }

    fn send_once(&self, prompt: &str) -> Result<String, AttemptError> {
        let temperature = if self.temperature_rejected.load(Ordering::SeqCst) {
            None
        } else {
            self.config.temperature
        };
        let wire = self.config.provider.request(
            &self.config.base_url,
            &self.config.model_name,
            prompt,
            temperature,
            self.api_key.as_deref(),
        );
        let mut req = self.http.post(&wire.url).json(&wire.body);
        for (name, value) in &wire.headers {
            req = req.header(*name, value);
        }
        let response = {
            let _permit = self.gate.acquire();
            self.requests_sent.fetch_add(1, Ordering::SeqCst);
            req.send().and_then(|r| {
                let status = r.status();
                r.text().map(|body| (status, body))
            })
        };
        let (status, body) = response.map_err(|e| AttemptError::Retryable(format!("transport: {e}")))?;
        let code = status.as_u16();
        if status.is_success() {
            let value: serde_json::Value = serde_json::from_str(&body)
                .map_err(|e| AttemptError::Retryable(format!("malformed response body: {e}")))?;
            return self
                .config
                .provider
                .extract_text(&value)
                .ok_or_else(|| AttemptError::Retryable("response carries no message text".into()));
        }
        match code {
            401 | 403 => Err(AttemptError::Fatal(LlmError::Auth { status: code })),
            400 if temperature.is_some() && body.to_ascii_lowercase().contains("temperature") => {
                Err(AttemptError::TemperatureRejected)
            }
            408 | 409 | 429 => Err(AttemptError::Retryable(format!("HTTP {code}"))),
            c if c >= 500 => Err(AttemptError::Retryable(format!("HTTP {code}"))),
            _ => Err(AttemptError::Fatal(LlmError::Rejected {
                status: code,
                body: body.chars().take(500).collect(),
            })),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::mock::{MockResponse, MockServer};
    use super::*;
    use std::sync::Arc;

    fn config(url: &str) -> LlmEndpointConfig {
        LlmEndpointConfig {
            base_url: url.to_string(),
            model_name: "mock-model".into(),
            backoff_base_ms: 1,
            timeout_secs: 10.0,
            ..LlmEndpointConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(LlmEndpointConfig {
            max_concurrency: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(LlmEndpointConfig {
            timeout_secs: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(LlmEndpointConfig::default().validate().is_ok());
    }

    #[test]
    fn retries_then_succeeds() {
        let calls = Arc::new(AtomicUsize::new(0));
        let c = calls.clone();
        let server = MockServer::start(move |_req| {
            if c.fetch_add(1, Ordering::SeqCst) < 2 {
                MockResponse::status(500, "boom")
            } else {
                MockResponse::chat("{\"predicted_lab\": 4.0, \"justification\": \"ok\"}")
            }
        })
        .unwrap();
        let client = LlmClient::new(
            LlmEndpointConfig {
                max_retries: 3,
                ..config(&server.url())
            },
            None,
        )
        .unwrap();
        let out = client.complete("hello").unwrap();
        assert!(out.text.contains("4.0"));
        assert_eq!(server.requests(), 3);
        assert_eq!(client.network_requests(), 3);
    }

    #[test]
    fn exhausted_retries_carry_attempt_log() {
        let server = MockServer::start(|_req| MockResponse::status(503, "down")).unwrap();
        let client = LlmClient::new(
            LlmEndpointConfig {
                max_retries: 2,
                ..config(&server.url())
            },
            None,
        )
        .unwrap();
        match client.complete("x") {
            Err(LlmError::Exhausted { attempts }) => {
                assert_eq!(attempts.len(), 3);
                assert!(attempts[0].contains("503"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn auth_failure_is_not_retried() {
        let server = MockServer::start(|_req| MockResponse::status(401, "nope")).unwrap();
        let client = LlmClient::new(config(&server.url()), None).unwrap();
        assert!(matches!(client.complete("x"), Err(LlmError::Auth { status: 401 })));
        assert_eq!(server.requests(), 1);
    }

    #[test]
    fn temperature_rejection_falls_back_to_default() {
        let server = MockServer::start(|req| {
            let body = req.json().unwrap();
            if body.get("temperature").is_some() {
                MockResponse::status(400, "{\"error\": \"Unsupported parameter: 'temperature'\"}")
            } else {
                MockResponse::chat("fine")
            }
        })
        .unwrap();
        let client = LlmClient::new(config(&server.url()), None).unwrap();
        assert_eq!(client.complete("a").unwrap().text, "fine");
        assert_eq!(client.complete("b").unwrap().text, "fine");
        assert_eq!(server.requests(), 3);
    }

    #[test]
    fn cache_hit_skips_network() {
        let dir = tempfile::tempdir().unwrap();
        let server = MockServer::start(|_req| MockResponse::chat("cached text")).unwrap();
        let client = LlmClient::new(config(&server.url()), Some(ResponseCache::open(dir.path()).unwrap())).unwrap();
        let first = client.complete("same prompt").unwrap();
        let second = client.complete("same prompt").unwrap();
        assert!(!first.from_cache);
        assert!(second.from_cache);
        assert_eq!(first.text, second.text);
        assert_eq!(server.requests(), 1);

        // Offline replay from a fresh client pointing nowhere.
        let offline = LlmClient::new(
            config("http://127.0.0.1:9"),
            Some(ResponseCache::open(dir.path()).unwrap()),
        )
        .unwrap()
        .offline();
        assert_eq!(offline.complete("same prompt").unwrap().text, "cached text");
        assert!(matches!(offline.complete("other"), Err(LlmError::Offline { .. })));
        assert_eq!(offline.network_requests(), 0);
    }

    #[test]
    fn invalid_responses_are_retried_and_not_cached() {
        let dir = tempfile::tempdir().unwrap();
        let n = Arc::new(AtomicUsize::new(0));
        let c = n.clone();
        let server = MockServer::start(move |_req| {
            if c.fetch_add(1, Ordering::SeqCst) == 0 {
                MockResponse::chat("garbage")
            } else {
                MockResponse::chat("good")
            }
        })
        .unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let client = LlmClient::new(config(&server.url()), Some(cache)).unwrap();
        let out = client
            .complete_validated("p", |t| if t == "good" { Ok(()) } else { Err("bad".into()) })
            .unwrap();
        assert_eq!(out.text, "good");
        assert_eq!(server.requests(), 2);
        assert_eq!(ResponseCache::open(dir.path()).unwrap().len().unwrap(), 1);
    }

    #[test]
    fn secrets_never_reach_the_cache() {
        let dir = tempfile::tempdir().unwrap();
        let var = "DOSING_OPE_TEST_SECRET_KEY";
        std::env::set_var(var, "sk-very-secret");
        let server = MockServer::start(|req| {
            assert_eq!(req.header("authorization"), Some("Bearer sk-very-secret"));
            MockResponse::chat("ok")
        })
        .unwrap();
        let client = LlmClient::new(
            LlmEndpointConfig {
                api_key_env: Some(var.into()),
                ..config(&server.url())
            },
            Some(ResponseCache::open(dir.path()).unwrap()),
        )
        .unwrap();
        client.complete("p").unwrap();
        for entry in std::fs::read_dir(dir.path()).unwrap() {
            let text = std::fs::read_to_string(entry.unwrap().path()).unwrap();
            assert!(!text.contains("sk-very-secret"));
        }
    }
}
