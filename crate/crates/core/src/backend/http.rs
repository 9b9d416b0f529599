use std::time::Instant;

use base64::Engine;
use futures::future::BoxFuture;
use futures::FutureExt;
use serde::Deserialize;
use serde_json::{json, Value};

use super::{Backend, BackendConfig, BackendError, MessagePart, ModelRequest, ModelResponse, Usage};
use crate::model::ImageStore;

/// OpenAI-compatible `POST /v1/chat/completions` client. Images are inlined
/// as base64 data URLs.
pub struct HttpBackend {
    client: reqwest::Client,
    url: String,
    config: BackendConfig,
    store: ImageStore,
}

impl HttpBackend {
    pub fn new(config: &BackendConfig, store: ImageStore) -> Result<Self, BackendError> {
        let base = config.endpoint.trim_end_matches('/');
        let url = if base.ends_with("/chat/completions") {
            base.to_string()
        } else if base.ends_with("/v1") {
            format!("{base}/chat/completions")
        } else {
            format!("{base}/v1/chat/completions")
        };
        let client = reqwest::Client::builder()
            .build()
            .map_err(|e| BackendError::InvalidConfig(e.to_string()))?;
        Ok(Self {
            client,
            url,
            config: config.clone(),
            store,
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    /// The JSON body sent for `request`.
    pub fn body(&self, request: &ModelRequest) -> Result<Value, BackendError> {
        let mut content = Vec::with_capacity(request.messages.len());
        for part in &request.messages {
            match part {
                MessagePart::Text { text } => content.push(json!({"type": "text", "text": text})),
                MessagePart::Image { image } => {
                    let bytes = self
                        .store
                        .read(image)
                        .map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
                    let data = base64::engine::general_purpose::STANDARD.encode(bytes);
                    let mime = crate::model::image_mime(&image.path);
                    content.push(json!({
                        "type": "image_url",
                        "image_url": {"url": format!("data:{mime};base64,{data}")}
                    }));
                }
            }
        }
        Ok(json!({
            "model": self.config.model_for(request.role_tag),
            "messages": [{"role": "user", "content": content}],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
            "stream": false,
        }))
    }

    fn api_key(&self) -> Result<Option<String>, BackendError> {
        match &self.config.api_key_env {
            None => Ok(None),
            Some(var) => std::env::var(var)
                .map(Some)
                .map_err(|_| BackendError::Authentication(format!("environment variable {var} is not set"))),
        }
    }
}

#[derive(Deserialize)]
struct CompletionBody {
    #[serde(default)]
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<UsageBody>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct UsageBody {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

impl Backend for HttpBackend {
    fn complete(&self, request: &ModelRequest) -> BoxFuture<'static, Result<ModelResponse, BackendError>> {
        let prepared = self.body(request).and_then(|b| Ok((b, self.api_key()?)));
        let client = self.client.clone();
        let url = self.url.clone();
        async move {
            let (body, key) = prepared?;
            let started = Instant::now();
            let mut req = client.post(&url).json(&body);
            if let Some(key) = key {
                req = req.bearer_auth(key);
            }
            let resp = req.send().await.map_err(|e| BackendError::Transport {
                attempts: 1,
                message: e.to_string(),
            })?;
            let status = resp.status();
            let text = resp.text().await.map_err(|e| BackendError::Transport {
                attempts: 1,
                message: e.to_string(),
            })?;
            if status.as_u16() == 401 || status.as_u16() == 403 {
                return Err(BackendError::Authentication(format!("{status}: {text}")));
            }
            if !status.is_success() {
                return Err(BackendError::Server {
                    status: status.as_u16(),
                    message: text,
                });
            }
            let parsed: CompletionBody =
                serde_json::from_str(&text).map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
            let content = parsed
                .choices
                .into_iter()
                .next()
                .ok_or_else(|| BackendError::MalformedResponse("no choices".into()))?
                .message
                .content
                .unwrap_or_default();
            Ok(ModelResponse {
                text: content,
                usage: parsed.usage.map(|u| Usage {
                    prompt_tokens: u.prompt_tokens,
                    completion_tokens: u.completion_tokens,
                }),
                latency_ms: started.elapsed().as_millis() as u64,
            })
        }
        .boxed()
    }
}
