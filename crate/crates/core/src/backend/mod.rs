//! Uniform chat-completion contract for every model call made by the
//! pipeline and the chain executor.
//!
//! [`ModelClient`] wraps a [`Backend`] with request validation, retries with
//! exponential backoff, and a per-endpoint concurrency limit. Two backends
//! exist: [`HttpBackend`] speaks the OpenAI-compatible chat-completions
//! protocol, [`ScriptedBackend`] replays role-keyed playlists for tests and
//! reproducible runs.

mod http;
mod scripted;

use std::collections::{BTreeMap, HashMap};
use std::future::Future;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Duration;

use futures::future::BoxFuture;
use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;

use crate::model::{ImageRef, ImageStore};

pub use http::HttpBackend;
pub use scripted::{ScriptEntry, ScriptedBackend};

pub const DEFAULT_TEMPERATURE: f64 = 0.0;
pub const DEFAULT_MAX_TOKENS: u32 = 1024;

/// Default model for the image-reading stages.
pub const DEFAULT_VISION_MODEL: &str = "lmms-lab/llava-onevision-qwen2-7b-ov";
/// Default model for the text-only stages.
pub const DEFAULT_TEXT_MODEL: &str = "Qwen/Qwen2.5-7B-Instruct";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleTag {
    Extract,
    Connect,
    Annotate,
    Question,
    ChainPlan,
    ChainAnswer,
    ChainStop,
}

impl RoleTag {
    pub const ALL: [RoleTag; 7] = [
        Self::Extract,
        Self::Connect,
        Self::Annotate,
        Self::Question,
        Self::ChainPlan,
        Self::ChainAnswer,
        Self::ChainStop,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Extract => "extract",
            Self::Connect => "connect",
            Self::Annotate => "annotate",
            Self::Question => "question",
            Self::ChainPlan => "chain_plan",
            Self::ChainAnswer => "chain_answer",
            Self::ChainStop => "chain_stop",
        }
    }

    /// Inclusive bounds on image attachments for this stage.
    fn image_bounds(self) -> (usize, usize) {
        match self {
            Self::Extract => (1, 1),
            Self::Annotate => (2, 2),
            Self::Connect | Self::Question | Self::ChainStop => (0, 0),
            Self::ChainPlan | Self::ChainAnswer => (1, usize::MAX),
        }
    }

    fn default_model(self) -> &'static str {
        match self {
            Self::Extract | Self::Annotate => DEFAULT_VISION_MODEL,
            Self::Connect | Self::Question => DEFAULT_TEXT_MODEL,
            Self::ChainPlan | Self::ChainAnswer | Self::ChainStop => DEFAULT_VISION_MODEL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MessagePart {
    Text { text: String },
    Image { image: ImageRef },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRequest {
    pub role_tag: RoleTag,
    pub messages: Vec<MessagePart>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ModelRequest {
    pub fn new(role_tag: RoleTag, messages: Vec<MessagePart>) -> Self {
        Self {
            role_tag,
            messages,
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }

    pub fn images(&self) -> impl Iterator<Item = &ImageRef> {
        self.messages.iter().filter_map(|m| match m {
            MessagePart::Image { image } => Some(image),
            MessagePart::Text { .. } => None,
        })
    }

    /// All text parts joined with newlines.
    pub fn text(&self) -> String {
        self.messages
            .iter()
            .filter_map(|m| match m {
                MessagePart::Text { text } => Some(text.as_str()),
                MessagePart::Image { .. } => None,
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let invalid = |m: String| BackendError::InvalidRequest(format!("{}: {m}", self.role_tag.as_str()));
        if !self.messages.iter().any(|m| matches!(m, MessagePart::Text { .. })) {
            return Err(invalid("at least one text part is required".into()));
        }
        let n = self.images().count();
        let (lo, hi) = self.role_tag.image_bounds();
        if n < lo || n > hi {
            return Err(invalid(format!("{n} image parts not permitted for this stage")));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(invalid("temperature must be >= 0".into()));
        }
        if self.max_tokens == 0 {
            return Err(invalid("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<Usage>,
    pub latency_ms: u64,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("server error {status}: {message}")]
    Server { status: u16, message: String },
    #[error("authentication error: {0}")]
    Authentication(String),
    #[error("script exhausted for stage {0}")]
    ScriptExhausted(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid backend config: {0}")]
    InvalidConfig(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("empty batch")]
    EmptyBatch,
}

impl BackendError {
    fn is_retryable(&self) -> bool {
        match self {
            Self::Transport { .. } => true,
            Self::Server { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }

    fn with_attempts(self, attempts: u32) -> Self {
        match self {
            Self::Transport { message, .. } => Self::Transport { attempts, message },
            other => other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    Scripted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_backoff_ms: 500,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based): `base * 2^(retry-1)`.
    pub fn backoff(&self, retry: u32) -> Duration {
        let factor = 1u64 << retry.saturating_sub(1).min(16);
        Duration::from_millis(self.base_backoff_ms.saturating_mul(factor))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint: String,
    pub model: String,
    /// Per-stage model overrides; stages not listed use the stage default
    /// (or `model` when that is set).
    pub stage_models: BTreeMap<RoleTag, String>,
    pub api_key_env: Option<String>,
    pub retry: RetryPolicy,
    pub parallelism: usize,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Playlist file for the scripted backend.
    pub script: Option<PathBuf>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Http,
            endpoint: "http://localhost:8000".into(),
            model: String::new(),
            stage_models: BTreeMap::new(),
            api_key_env: None,
            retry: RetryPolicy::default(),
            parallelism: 4,
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            script: None,
        }
    }
}

impl BackendConfig {
    pub fn scripted() -> Self {
        Self {
            kind: BackendKind::Scripted,
            endpoint: "scripted://local".into(),
            retry: RetryPolicy {
                max_attempts: 1,
                base_backoff_ms: 0,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let bad = |m: &str| Err(BackendError::InvalidConfig(m.into()));
        if self.parallelism < 1 {
            return bad("parallelism must be >= 1");
        }
        if self.retry.max_attempts < 1 {
            return bad("retry.max_attempts must be >= 1");
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be positive");
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return bad("temperature must be >= 0");
        }
        if self.kind == BackendKind::Http && self.endpoint.trim().is_empty() {
            return bad("http backend requires an endpoint");
        }
        Ok(())
    }

    pub fn model_for(&self, role: RoleTag) -> String {
        if let Some(m) = self.stage_models.get(&role) {
            return m.clone();
        }
        if !self.model.is_empty() {
            return self.model.clone();
        }
        role.default_model().to_string()
    }

    /// Stage name to model id, for graph provenance.
    pub fn model_map(&self) -> BTreeMap<String, String> {
        [RoleTag::Extract, RoleTag::Connect, RoleTag::Annotate, RoleTag::Question]
            .into_iter()
            .map(|r| (r.as_str().to_string(), self.model_for(r)))
            .collect()
    }
}

/// A model endpoint. The returned future must not borrow `self` or the
/// request; any ordering-sensitive work (e.g. dequeuing a scripted
/// response) happens synchronously inside `complete`, before the future is
/// returned, so batch ordering is deterministic.
pub trait Backend: Send + Sync {
    fn complete(&self, request: &ModelRequest) -> BoxFuture<'static, Result<ModelResponse, BackendError>>;
}

fn endpoint_limiter(endpoint: &str, permits: usize) -> Arc<Semaphore> {
    static LIMITERS: OnceLock<Mutex<HashMap<String, Arc<Semaphore>>>> = OnceLock::new();
    let map = LIMITERS.get_or_init(Default::default);
    let mut map = map.lock().unwrap_or_else(|p| p.into_inner());
    map.entry(endpoint.to_string())
        .or_insert_with(|| Arc::new(Semaphore::new(permits)))
        .clone()
}

/// Validating, retrying, rate-limited front end over a [`Backend`].
#[derive(Clone)]
pub struct ModelClient {
    backend: Arc<dyn Backend>,
    config: BackendConfig,
    limiter: Arc<Semaphore>,
}

impl ModelClient {
    /// Builds the backend named by `config.kind`. The image store is used by
    /// the HTTP backend to inline image bytes.
    pub fn from_config(config: BackendConfig, store: ImageStore) -> Result<Self, BackendError> {
        config.validate()?;
        let backend: Arc<dyn Backend> = match config.kind {
            BackendKind::Http => Arc::new(HttpBackend::new(&config, store)?),
            BackendKind::Scripted => {
                let path = config
                    .script
                    .as_ref()
                    .ok_or_else(|| BackendError::InvalidConfig("scripted backend requires `script`".into()))?;
                Arc::new(ScriptedBackend::from_file(path)?)
            }
        };
        Self::with_backend(backend, config)
    }

    pub fn with_backend(backend: Arc<dyn Backend>, config: BackendConfig) -> Result<Self, BackendError> {
        config.validate()?;
        let limiter = match config.kind {
            BackendKind::Http => endpoint_limiter(&config.endpoint, config.parallelism),
            BackendKind::Scripted => Arc::new(Semaphore::new(config.parallelism)),
        };
        Ok(Self {
            backend,
            config,
            limiter,
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    /// A request for `role` carrying the configured decoding parameters.
    pub fn request(&self, role: RoleTag, messages: Vec<MessagePart>) -> ModelRequest {
        ModelRequest {
            role_tag: role,
            messages,
            temperature: self.config.temperature,
            max_tokens: self.config.max_tokens,
        }
    }

    /// Sends one request, retrying transient failures up to
    /// `retry.max_attempts` total attempts.
    ///
    /// The first backend call is issued before the future is returned, so
    /// requests created in a fixed order reach the backend in that order.
    pub fn complete(
        &self,
        request: ModelRequest,
    ) -> impl Future<Output = Result<ModelResponse, BackendError>> + Send + 'static {
        let valid = request.validate();
        let first = valid.is_ok().then(|| self.backend.complete(&request));
        let backend = self.backend.clone();
        let limiter = self.limiter.clone();
        let policy = self.config.retry;
        async move {
            valid?;
            let mut pending = first;
            let mut attempt = 1u32;
            loop {
                let fut = pending.take().unwrap_or_else(|| backend.complete(&request));
                let result = {
                    let _permit = limiter.acquire().await.map_err(|e| BackendError::Transport {
                        attempts: attempt,
                        message: e.to_string(),
                    })?;
                    fut.await
                };
                match result {
                    Ok(r) => return Ok(r),
                    Err(e) if e.is_retryable() && attempt < policy.max_attempts => {
                        tracing::debug!(attempt, error = %e, "retrying model call");
                        tokio::time::sleep(policy.backoff(attempt)).await;
                        attempt += 1;
                    }
                    Err(e) => return Err(e.with_attempts(attempt)),
                }
            }
        }
    }

    /// Runs `requests` with at most `parallelism` in flight. Responses come
    /// back in request order; individual failures occupy their own slot.
    pub async fn run_batch(
        &self,
        requests: Vec<ModelRequest>,
    ) -> Result<Vec<Result<ModelResponse, BackendError>>, BackendError> {
        if requests.is_empty() {
            return Err(BackendError::EmptyBatch);
        }
        let width = self.config.parallelism;
        Ok(stream::iter(requests)
            .map(|r| self.complete(r))
            .buffered(width)
            .collect()
            .await)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn text(role: RoleTag) -> ModelRequest {
        ModelRequest::new(role, vec![MessagePart::Text { text: "hi".into() }])
    }

    fn img(id: &str) -> MessagePart {
        MessagePart::Image {
            image: ImageRef::new(id, format!("{id}.png")),
        }
    }

    #[test]
    fn request_stage_rules() {
        assert!(text(RoleTag::Connect).validate().is_ok());
        let mut r = text(RoleTag::Connect);
        r.messages.push(img("a"));
        assert!(r.validate().is_err());

        let mut a = text(RoleTag::Annotate);
        a.messages.push(img("a"));
        assert!(a.validate().is_err());
        a.messages.push(img("b"));
        assert!(a.validate().is_ok());

        let only_image = ModelRequest::new(RoleTag::Extract, vec![img("a")]);
        assert!(only_image.validate().is_err());
        let mut neg = text(RoleTag::Question);
        neg.temperature = -1.0;
        assert!(neg.validate().is_err());
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = BackendConfig::default();
        assert_eq!(c.temperature, 0.0);
        assert_eq!(c.max_tokens, 1024);
        assert!(c.validate().is_ok());
        assert_eq!(c.model_for(RoleTag::Extract), DEFAULT_VISION_MODEL);
        assert_eq!(c.model_for(RoleTag::Question), DEFAULT_TEXT_MODEL);
        let bad = BackendConfig {
            parallelism: 0,
            ..BackendConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = BackendConfig {
            retry: RetryPolicy {
                max_attempts: 0,
                base_backoff_ms: 1,
            },
            ..BackendConfig::default()
        };
        assert!(bad.validate().is_err());
        let parsed: BackendConfig =
            serde_json::from_str(r#"{"kind":"scripted","parallelism":2,"stage_models":{"connect":"m"}}"#).unwrap();
        assert_eq!(parsed.kind, BackendKind::Scripted);
        assert_eq!(parsed.model_for(RoleTag::Connect), "m");
        assert_eq!(parsed.retry, RetryPolicy::default());
    }

    #[test]
    fn backoff_doubles() {
        let p = RetryPolicy {
            max_attempts: 4,
            base_backoff_ms: 10,
        };
        assert_eq!(p.backoff(1), Duration::from_millis(10));
        assert_eq!(p.backoff(3), Duration::from_millis(40));
    }
}
