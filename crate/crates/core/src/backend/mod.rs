//! Chat-completion and embedding providers.
//!
//! [`Backend`] is the provider-agnostic contract. [`http::HttpBackend`] speaks
//! the OpenAI-compatible wire format; [`mock::MockBackend`] is a seeded,
//! network-free stand-in whose output depends only on its seed and the
//! request, never on call order.

pub mod http;
pub mod mock;
pub mod retry;

use std::collections::BTreeMap;

use async_trait::async_trait;
use futures::StreamExt;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::QuestionId;

/// What a chat request is for. Not sent over the wire; it lets the mock pick a
/// reply shape and lets logs be filtered by phase.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RequestTag {
    OpenAnswer {
        agent_index: usize,
        question_id: QuestionId,
    },
    Rating {
        agent_index: usize,
        question_id: QuestionId,
        attempt: u32,
    },
    SurveyGeneration {
        round: u32,
        requested: usize,
    },
    Regeneration {
        round: u32,
        requested: usize,
    },
    Summary {
        topic: String,
    },
    Other,
}

impl RequestTag {
    pub fn kind(&self) -> &'static str {
        match self {
            RequestTag::OpenAnswer { .. } => "open_answer",
            RequestTag::Rating { .. } => "rating",
            RequestTag::SurveyGeneration { .. } => "survey_generation",
            RequestTag::Regeneration { .. } => "regeneration",
            RequestTag::Summary { .. } => "summary",
            RequestTag::Other => "other",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system_prompt: String,
    pub user_prompt: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub tag: RequestTag,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.system_prompt.trim().is_empty() || self.user_prompt.trim().is_empty() {
            return Err(BackendError::InvalidRequest("empty prompt".into()));
        }
        if self.max_output_tokens == 0 {
            return Err(BackendError::InvalidRequest(
                "max_output_tokens must be at least 1".into(),
            ));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(BackendError::InvalidRequest(format!(
                "temperature {} is invalid",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    #[serde(default)]
    pub provider_metadata: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRequest {
    pub texts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingResponse {
    pub vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("rate limited after {attempts} attempt(s)")]
    RateLimited { attempts: u32 },
    #[error("provider unavailable after {attempts} attempt(s): {last}")]
    Unavailable { attempts: u32, last: String },
    /// Transient failure inside the retry loop; callers see it only when
    /// retries are disabled.
    #[error("transient provider failure: {0}")]
    Transient(String),
    #[error("HTTP 429 rate limit")]
    RateLimitHit,
    #[error("provider rejected request with status {status}: {message}")]
    Rejected { status: u16, message: String },
    #[error("malformed provider response: {0}")]
    MalformedProviderResponse(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transient(_) | BackendError::RateLimitHit)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("batch element {index} failed: {cause}")]
pub struct BatchElementFailed {
    pub index: usize,
    pub cause: BackendError,
}

#[async_trait]
pub trait Backend: Send + Sync {
    async fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;

    async fn embed(&self, request: &EmbeddingRequest) -> Result<EmbeddingResponse, BackendError>;
}

#[async_trait]
impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    async fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).complete(request).await
    }

    async fn embed(&self, request: &EmbeddingRequest) -> Result<EmbeddingResponse, BackendError> {
        (**self).embed(request).await
    }
}

/// Runs `requests` with at most `parallelism` in flight and returns the
/// responses in input order. The first failure in input order fails the
/// batch.
pub async fn run_batch(
    backend: &dyn Backend,
    requests: &[ChatRequest],
    parallelism: usize,
) -> Result<Vec<ChatResponse>, BatchElementFailed> {
    let mut stream = futures::stream::iter(requests.iter().enumerate())
        .map(|(index, request)| async move { (index, backend.complete(request).await) })
        .buffered(parallelism.max(1));
    let mut out = Vec::with_capacity(requests.len());
    while let Some((index, result)) = stream.next().await {
        match result {
            Ok(response) => out.push(response),
            Err(cause) => return Err(BatchElementFailed { index, cause }),
        }
    }
    Ok(out)
}

pub fn validate_embeddings(
    request: &EmbeddingRequest,
    response: &EmbeddingResponse,
) -> Result<(), BackendError> {
    if response.vectors.len() != request.texts.len() {
        return Err(BackendError::MalformedProviderResponse(format!(
            "{} embeddings for {} texts",
            response.vectors.len(),
            request.texts.len()
        )));
    }
    if let Some(first) = response.vectors.first() {
        if first.is_empty() || response.vectors.iter().any(|v| v.len() != first.len()) {
            return Err(BackendError::MalformedProviderResponse(
                "embeddings have inconsistent dimensions".into(),
            ));
        }
    }
    if response.vectors.iter().flatten().any(|x| !x.is_finite()) {
        return Err(BackendError::MalformedProviderResponse(
            "non-finite embedding component".into(),
        ));
    }
    Ok(())
}
