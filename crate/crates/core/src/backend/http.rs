//! OpenAI-compatible HTTP provider (`/chat/completions`, `/embeddings`).

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde_json::{json, Value};

use super::retry::RetryPolicy;
use super::{
    validate_embeddings, Backend, BackendError, ChatRequest, ChatResponse, EmbeddingRequest,
    EmbeddingResponse,
};
use crate::model::ProviderSettings;
use crate::persistence::JsonlWriter;

pub const API_KEY_ENV: &str = "DELPHI_API_KEY";

pub struct HttpBackend {
    client: reqwest::Client,
    base_url: String,
    chat_model: String,
    embedding_model: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    audit: Option<Arc<JsonlWriter>>,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend")
            .field("base_url", &self.base_url)
            .field("chat_model", &self.chat_model)
            .field("embedding_model", &self.embedding_model)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

impl HttpBackend {
    /// A missing or blank key is accepted here and reported as `Auth` on the
    /// first call, before anything touches the network.
    pub fn new(settings: &ProviderSettings, api_key: Option<String>) -> Result<Self, BackendError> {
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs(settings.request_timeout_secs.max(1)))
            .build()
            .map_err(|e| BackendError::InvalidRequest(format!("http client: {e}")))?;
        Ok(Self {
            client,
            base_url: settings.base_url.trim_end_matches('/').to_string(),
            chat_model: settings.chat_model.clone(),
            embedding_model: settings.embedding_model.clone(),
            api_key: api_key.filter(|k| !k.trim().is_empty()),
            retry: RetryPolicy {
                max_attempts: settings.max_attempts,
                base_delay: Duration::from_millis(settings.base_delay_ms),
                factor: 2.0,
            },
            audit: None,
        })
    }

    pub fn from_env(settings: &ProviderSettings) -> Result<Self, BackendError> {
        Self::new(settings, std::env::var(API_KEY_ENV).ok())
    }

    /// Log every raw exchange to a JSONL file.
    pub fn with_audit_log(mut self, log: Arc<JsonlWriter>) -> Self {
        self.audit = Some(log);
        self
    }

    pub fn with_retry_policy(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn key(&self) -> Result<&str, BackendError> {
        self.api_key
            .as_deref()
            .ok_or_else(|| BackendError::Auth(format!("{API_KEY_ENV} is not set")))
    }

    async fn post_once(
        &self,
        endpoint: &str,
        body: &Value,
        attempt: u32,
    ) -> Result<Value, BackendError> {
        let key = self.key()?;
        let url = format!("{}/{endpoint}", self.base_url);
        let result = self.client.post(&url).bearer_auth(key).json(body).send().await;
        let response = match result {
            Ok(r) => r,
            Err(e) => {
                self.audit(endpoint, body, attempt, None, &Value::String(e.to_string()));
                return Err(BackendError::Transient(e.to_string()));
            }
        };
        let status = response.status();
        let text = response
            .text()
            .await
            .map_err(|e| BackendError::Transient(e.to_string()))?;
        let parsed: Value = serde_json::from_str(&text).unwrap_or(Value::String(text.clone()));
        self.audit(endpoint, body, attempt, Some(status.as_u16()), &parsed);

        match status.as_u16() {
            200..=299 => {
                if parsed.is_object() {
                    Ok(parsed)
                } else {
                    Err(BackendError::MalformedProviderResponse(
                        "response body is not a JSON object".into(),
                    ))
                }
            }
            401 | 403 => Err(BackendError::Auth(format!("status {status}"))),
            429 => Err(BackendError::RateLimitHit),
            408 | 500..=599 => Err(BackendError::Transient(format!("status {status}"))),
            code => Err(BackendError::Rejected {
                status: code,
                message: text.chars().take(500).collect(),
            }),
        }
    }

    fn audit(&self, endpoint: &str, request: &Value, attempt: u32, status: Option<u16>, response: &Value) {
        if let Some(log) = &self.audit {
            let record = json!({
                "endpoint": endpoint,
                "attempt": attempt,
                "status": status,
                "request": request,
                "response": response,
            });
            if let Err(e) = log.append(&record) {
                tracing::warn!(error = %e, "could not write provider audit record");
            }
        }
    }

    async fn post(&self, endpoint: &str, body: Value) -> Result<Value, BackendError> {
        self.key()?;
        self.retry
            .run(|attempt| {
                let body = &body;
                async move { self.post_once(endpoint, body, attempt).await }
            })
            .await
    }
}

fn parse_chat(value: &Value) -> Result<ChatResponse, BackendError> {
    let text = value
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .ok_or_else(|| {
            BackendError::MalformedProviderResponse("missing choices[0].message.content".into())
        })?;
    let mut provider_metadata = BTreeMap::new();
    for key in ["id", "model", "usage", "system_fingerprint"] {
        if let Some(v) = value.get(key) {
            provider_metadata.insert(key.to_string(), v.clone());
        }
    }
    if let Some(reason) = value.pointer("/choices/0/finish_reason") {
        provider_metadata.insert("finish_reason".into(), reason.clone());
    }
    Ok(ChatResponse {
        text: text.to_string(),
        provider_metadata,
    })
}

fn parse_embeddings(value: &Value) -> Result<EmbeddingResponse, BackendError> {
    let malformed = |m: &str| BackendError::MalformedProviderResponse(m.to_string());
    let data = value
        .get("data")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed("missing data array"))?;
    let mut indexed = Vec::with_capacity(data.len());
    for (pos, item) in data.iter().enumerate() {
        let index = item
            .get("index")
            .and_then(Value::as_u64)
            .map(|i| i as usize)
            .unwrap_or(pos);
        let vector = item
            .get("embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| malformed("missing embedding"))?
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| malformed("non-numeric embedding")))
            .collect::<Result<Vec<f64>, _>>()?;
        indexed.push((index, vector));
    }
    indexed.sort_by_key(|(i, _)| *i);
    Ok(EmbeddingResponse {
        vectors: indexed.into_iter().map(|(_, v)| v).collect(),
    })
}

#[async_trait]
impl Backend for HttpBackend {
    async fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.validate()?;
        let body = json!({
            "model": self.chat_model,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user", "content": request.user_prompt},
            ],
        });
        let value = self.post("chat/completions", body).await?;
        parse_chat(&value)
    }

    async fn embed(&self, request: &EmbeddingRequest) -> Result<EmbeddingResponse, BackendError> {
        if request.texts.is_empty() {
            return Err(BackendError::InvalidRequest("no texts to embed".into()));
        }
        let body = json!({
            "model": self.embedding_model,
            "input": request.texts,
        });
        let value = self.post("embeddings", body).await?;
        let response = parse_embeddings(&value)?;
        validate_embeddings(request, &response)?;
        Ok(response)
    }
}
