// SPDX-License-Identifier: Apache-2.0

//! Model backends: configuration, query dispatch with caching, retries and
//! rate limiting, plus offline replay.

mod cache;
mod mock;
mod rate;
mod remote;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::chart::ChartImage;
use crate::cohort::{PredictionWindow, WindowId};
use crate::error::{Error, Result};
use crate::prompt::TemplateKind;

pub use cache::{CacheKeyParts, CacheRecord, ResponseCache};
pub use mock::{echo_sentence, linear_forecast, mock_predict, MockPolicy, MALFORMED_REPLY};
pub use rate::{Clock, RateLimiter, SystemClock, VirtualClock};
pub use remote::{
    build_payload, classify_status, parse_reply, Adapter, ChatRequest, HttpPayload, HttpTransport, Transport,
    TransportError,
};

/// Digest recorded for text-only requests.
pub const NO_IMAGE: &str = "none";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteSpec {
    pub adapter: Adapter,
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub temperature: Option<f64>,
    pub max_tokens: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Remote(RemoteSpec),
    Mock(MockPolicy),
}

/// Flat on-disk form of a backend entry.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawBackend {
    pub id: String,
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adapter: Option<Adapter>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reply: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timeout_secs: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_retries: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rate_limit_per_minute: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBackend", into = "RawBackend")]
pub struct BackendConfig {
    pub id: String,
    pub kind: BackendKind,
    pub timeout: Duration,
    pub max_retries: u32,
    pub rate_limit_per_minute: u32,
}

impl TryFrom<RawBackend> for BackendConfig {
    type Error = Error;

    fn try_from(raw: RawBackend) -> Result<Self> {
        let id = raw.id.trim().to_string();
        if id.is_empty() {
            return Err(Error::Config("backend id must not be empty".into()));
        }
        let need = |v: Option<String>, field: &str| {
            v.filter(|s| !s.is_empty())
                .ok_or_else(|| Error::Config(format!("backend `{id}`: remote backends need `{field}`")))
        };
        let kind = match raw.kind.as_str() {
            "remote" => BackendKind::Remote(RemoteSpec {
                adapter: raw
                    .adapter
                    .ok_or_else(|| Error::Config(format!("backend `{id}`: remote backends need `adapter`")))?,
                endpoint: need(raw.endpoint, "endpoint")?,
                model: need(raw.model, "model")?,
                api_key_env: need(raw.api_key_env, "api_key_env")?,
                temperature: raw.temperature,
                max_tokens: raw.max_tokens,
            }),
            "mock" => {
                let policy = match raw.policy.as_deref() {
                    Some("persistence") => MockPolicy::Persistence,
                    Some("linear") => MockPolicy::Linear,
                    Some("noisy") => MockPolicy::Noisy {
                        sigma: raw
                            .sigma
                            .filter(|s| s.is_finite() && *s >= 0.0)
                            .ok_or_else(|| Error::Config(format!("backend `{id}`: noisy policy needs sigma >= 0")))?,
                        seed: raw
                            .seed
                            .ok_or_else(|| Error::Config(format!("backend `{id}`: noisy policy needs a seed")))?,
                    },
                    Some("malformed") => MockPolicy::Malformed,
                    Some("fixed") => MockPolicy::Fixed {
                        reply: raw
                            .reply
                            .ok_or_else(|| Error::Config(format!("backend `{id}`: fixed policy needs `reply`")))?,
                    },
                    other => {
                        return Err(Error::Config(format!(
                            "backend `{id}`: unknown mock policy {other:?} (persistence, linear, noisy, malformed, fixed)"
                        )))
                    }
                };
                BackendKind::Mock(policy)
            }
            other => {
                return Err(Error::Config(format!(
                    "backend `{id}`: kind must be `remote` or `mock`, got `{other}`"
                )))
            }
        };
        let rate = raw.rate_limit_per_minute.unwrap_or(60);
        if rate == 0 {
            return Err(Error::Config(format!("backend `{id}`: rate_limit_per_minute must be > 0")));
        }
        Ok(BackendConfig {
            id,
            kind,
            timeout: Duration::from_secs(raw.timeout_secs.unwrap_or(120)),
            max_retries: raw.max_retries.unwrap_or(3),
            rate_limit_per_minute: rate,
        })
    }
}

impl From<BackendConfig> for RawBackend {
    fn from(c: BackendConfig) -> Self {
        let mut raw = RawBackend {
            id: c.id,
            timeout_secs: Some(c.timeout.as_secs()),
            max_retries: Some(c.max_retries),
            rate_limit_per_minute: Some(c.rate_limit_per_minute),
            ..Default::default()
        };
        match c.kind {
            BackendKind::Remote(r) => {
                raw.kind = "remote".into();
                raw.adapter = Some(r.adapter);
                raw.endpoint = Some(r.endpoint);
                raw.model = Some(r.model);
                raw.api_key_env = Some(r.api_key_env);
                raw.temperature = r.temperature;
                raw.max_tokens = r.max_tokens;
            }
            BackendKind::Mock(p) => {
                raw.kind = "mock".into();
                match p {
                    MockPolicy::Persistence => raw.policy = Some("persistence".into()),
                    MockPolicy::Linear => raw.policy = Some("linear".into()),
                    MockPolicy::Malformed => raw.policy = Some("malformed".into()),
                    MockPolicy::Noisy { sigma, seed } => {
                        raw.policy = Some("noisy".into());
                        raw.sigma = Some(sigma);
                        raw.seed = Some(seed);
                    }
                    MockPolicy::Fixed { reply } => {
                        raw.policy = Some("fixed".into());
                        raw.reply = Some(reply);
                    }
                }
            }
        }
        raw
    }
}

impl BackendConfig {
    pub fn mock(id: impl Into<String>, policy: MockPolicy) -> Self {
        BackendConfig {
            id: id.into(),
            kind: BackendKind::Mock(policy),
            timeout: Duration::from_secs(120),
            max_retries: 3,
            rate_limit_per_minute: 60,
        }
    }

    pub fn model_name(&self) -> String {
        match &self.kind {
            BackendKind::Remote(r) => r.model.clone(),
            BackendKind::Mock(p) => p.descriptor(),
        }
    }

    pub fn is_remote(&self) -> bool {
        matches!(self.kind, BackendKind::Remote(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportStatus {
    Ok,
    Cached,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub backend_id: String,
    pub window_id: Option<WindowId>,
    pub template_id: Option<u8>,
    pub attempt_index: u32,
    pub raw_text: String,
    /// Unix milliseconds; mocks report 0.
    pub received_unix_ms: u64,
    pub status: TransportStatus,
    pub cache_key: String,
}

/// One query, everything the key and the mocks need.
#[derive(Debug, Clone, Copy)]
pub struct QueryRequest<'a> {
    pub prompt_text: &'a str,
    pub template_id: Option<u8>,
    pub kind: Option<TemplateKind>,
    pub image: Option<&'a ChartImage>,
    pub window: Option<&'a PredictionWindow>,
    pub attempt_index: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkMode {
    #[default]
    Online,
    /// Mocks and cache hits only.
    Offline,
    /// Cache hits only; any miss is an error.
    Replay,
}

/// Identifies one issued request; the run manifest keeps the full list.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RequestRecord {
    pub backend_id: String,
    pub window_id: Option<WindowId>,
    pub template_id: Option<u8>,
    pub attempt_index: u32,
    pub cache_key: String,
}

struct Backend {
    config: BackendConfig,
    transport: Option<Arc<dyn Transport>>,
    limiter: RateLimiter,
}

/// Routes queries to backends, consulting the cache first.
pub struct Dispatcher {
    backends: BTreeMap<String, Backend>,
    cache: Option<ResponseCache>,
    mode: NetworkMode,
    clock: Arc<dyn Clock>,
    remote_calls: AtomicU64,
    base_backoff: Duration,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl Dispatcher {
    pub fn new(cache: Option<ResponseCache>, mode: NetworkMode) -> Self {
        Self::with_clock(cache, mode, Arc::new(SystemClock::default()))
    }

    pub fn with_clock(cache: Option<ResponseCache>, mode: NetworkMode, clock: Arc<dyn Clock>) -> Self {
        Dispatcher {
            backends: BTreeMap::new(),
            cache,
            mode,
            clock,
            remote_calls: AtomicU64::new(0),
            base_backoff: Duration::from_millis(500),
        }
    }

    /// Registers a backend. Remote backends read their key from the
    /// environment now, unless the dispatcher never goes online.
    pub fn register(&mut self, config: BackendConfig) -> Result<()> {
        let transport: Option<Arc<dyn Transport>> = match (&config.kind, self.mode) {
            (BackendKind::Remote(r), NetworkMode::Online) => {
                let key = std::env::var(&r.api_key_env).map_err(|_| Error::Credential {
                    backend_id: config.id.clone(),
                    message: format!("environment variable {} is not set", r.api_key_env),
                })?;
                Some(Arc::new(HttpTransport::new(r.adapter, r.endpoint.clone(), key)))
            }
            _ => None,
        };
        self.insert(config, transport);
        Ok(())
    }

    /// Registers a backend with an explicit transport (tests, custom vendors).
    pub fn register_with_transport(&mut self, config: BackendConfig, transport: Arc<dyn Transport>) {
        self.insert(config, Some(transport));
    }

    fn insert(&mut self, config: BackendConfig, transport: Option<Arc<dyn Transport>>) {
        let limiter = RateLimiter::new(config.rate_limit_per_minute, self.clock.clone());
        self.backends.insert(
            config.id.clone(),
            Backend {
                config,
                transport,
                limiter,
            },
        );
    }

    pub fn set_base_backoff(&mut self, d: Duration) {
        self.base_backoff = d;
    }

    pub fn remote_calls(&self) -> u64 {
        self.remote_calls.load(Ordering::SeqCst)
    }

    pub fn mode(&self) -> NetworkMode {
        self.mode
    }

    pub fn backend_config(&self, id: &str) -> Option<&BackendConfig> {
        self.backends.get(id).map(|b| &b.config)
    }

    pub fn key_parts(&self, backend_id: &str, req: &QueryRequest<'_>) -> Result<CacheKeyParts> {
        let backend = self.backend(backend_id)?;
        Ok(CacheKeyParts {
            backend_id: backend_id.to_string(),
            model: backend.config.model_name(),
            prompt_digest: hex::encode(<sha2::Sha256 as sha2::Digest>::digest(req.prompt_text.as_bytes())),
            image_digest: req.image.map(|i| i.digest.clone()).unwrap_or_else(|| NO_IMAGE.to_string()),
            attempt_index: req.attempt_index,
        })
    }

    fn backend(&self, id: &str) -> Result<&Backend> {
        self.backends
            .get(id)
            .ok_or_else(|| Error::Config(format!("unknown backend `{id}`")))
    }

    pub fn query(&self, backend_id: &str, req: &QueryRequest<'_>) -> Result<ModelResponse> {
        if req.attempt_index < 1 {
            return Err(Error::Config("attempt index starts at 1".into()));
        }
        let backend = self.backend(backend_id)?;
        let parts = self.key_parts(backend_id, req)?;
        let key = parts.digest();
        let respond = |raw_text: String, received_unix_ms: u64, status: TransportStatus| ModelResponse {
            backend_id: backend_id.to_string(),
            window_id: req.window.map(PredictionWindow::id),
            template_id: req.template_id,
            attempt_index: req.attempt_index,
            raw_text,
            received_unix_ms,
            status,
            cache_key: key.clone(),
        };

        if let Some(cache) = &self.cache {
            if let Some(rec) = cache.get(backend_id, &key)? {
                return Ok(respond(rec.raw_text, rec.received_unix_ms, TransportStatus::Cached));
            }
        }
        if self.mode == NetworkMode::Replay {
            return Err(Error::Replay { key });
        }

        let (text, received) = match &backend.config.kind {
            BackendKind::Mock(policy) => (mock_predict(policy, req.window, req.kind, req.attempt_index)?, 0),
            BackendKind::Remote(spec) => {
                if self.mode == NetworkMode::Offline {
                    return Err(Error::Offline(format!(
                        "backend `{backend_id}` would need a network call (cache key {key})"
                    )));
                }
                let transport = backend.transport.as_ref().ok_or_else(|| Error::Credential {
                    backend_id: backend_id.to_string(),
                    message: "no transport configured".into(),
                })?;
                let image_png = req.image.map(ChartImage::png_bytes).transpose()?;
                let chat = ChatRequest {
                    model: spec.model.clone(),
                    text: req.prompt_text.to_string(),
                    image_png,
                    temperature: spec.temperature,
                    max_tokens: spec.max_tokens,
                    timeout: backend.config.timeout,
                };
                (self.send_with_retries(backend, transport.as_ref(), &chat)?, now_ms())
            }
        };

        if let Some(cache) = &self.cache {
            cache.put(&CacheRecord {
                key: key.clone(),
                parts,
                raw_text: text.clone(),
                received_unix_ms: received,
                status: "ok".into(),
            })?;
        }
        Ok(respond(text, received, TransportStatus::Ok))
    }

    fn send_with_retries(&self, backend: &Backend, transport: &dyn Transport, chat: &ChatRequest) -> Result<String> {
        let id = &backend.config.id;
        let mut attempts = 0u32;
        loop {
            backend.limiter.acquire();
            self.remote_calls.fetch_add(1, Ordering::SeqCst);
            attempts += 1;
            match transport.send(chat) {
                Ok(text) => return Ok(text),
                Err(TransportError::Auth(message)) => {
                    return Err(Error::Credential {
                        backend_id: id.clone(),
                        message,
                    })
                }
                Err(TransportError::Fatal(message)) => {
                    return Err(Error::Transport {
                        backend_id: id.clone(),
                        attempts,
                        message,
                    })
                }
                Err(TransportError::Retryable(message)) => {
                    if attempts > backend.config.max_retries {
                        return Err(Error::Transport {
                            backend_id: id.clone(),
                            attempts,
                            message,
                        });
                    }
                    self.clock.sleep(self.base_backoff * 2u32.pow(attempts - 1));
                }
            }
        }
    }
}

/// Re-reads every recorded response from the cache without network access.
pub fn replay_run(cache: &ResponseCache, requests: &[RequestRecord]) -> Result<Vec<ModelResponse>> {
    requests
        .iter()
        .map(|r| {
            let rec = cache
                .get(&r.backend_id, &r.cache_key)?
                .ok_or_else(|| Error::Replay { key: r.cache_key.clone() })?;
            Ok(ModelResponse {
                backend_id: r.backend_id.clone(),
                window_id: r.window_id.clone(),
                template_id: r.template_id,
                attempt_index: r.attempt_index,
                raw_text: rec.raw_text,
                received_unix_ms: rec.received_unix_ms,
                status: TransportStatus::Cached,
                cache_key: r.cache_key.clone(),
            })
        })
        .collect()
}
