//! Seeded, deterministic mock provider.
//!
//! Every reply is a pure function of the backend seed and the request, so
//! batch results do not depend on scheduling. Replies are shaped per request
//! kind (open answer, rating, list of statements or questions, summary) so the
//! orchestrator's parsers see realistic input.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use async_trait::async_trait;
use rand::seq::{index, IndexedRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use super::{
    Backend, BackendError, ChatRequest, ChatResponse, EmbeddingRequest, EmbeddingResponse,
    RequestTag,
};
use crate::model::QuestionId;

/// Theme phrases the mock talks about. The bundled topic lexicon matches each
/// of them.
pub const THEMES: [&str; 15] = [
    "geopolitical tensions",
    "international collaboration",
    "economic disparities",
    "economic efficiency",
    "ethical governance",
    "technical breakthroughs",
    "education systems",
    "regulatory frameworks",
    "industrial adoption",
    "cultural adaptation",
    "privacy protection",
    "psychological wellbeing",
    "data sovereignty",
    "environmental sustainability",
    "labour market transformation",
];

const CLAIMS: [&str; 8] = [
    "become the main driver of GenAI adoption",
    "slow down GenAI deployment",
    "require new global institutions",
    "widen the gap between regions",
    "be reshaped by open-source models",
    "dominate policy debates",
    "create new professional roles",
    "determine public trust in GenAI",
];

const STAKEHOLDERS: [&str; 10] = [
    "small businesses",
    "emerging economies",
    "universities",
    "national governments",
    "healthcare providers",
    "creative industries",
    "young workers",
    "civil society",
    "large technology firms",
    "international organizations",
];

const ANGLES: [&str; 6] = [
    "evolve over the next decade",
    "change the balance of power",
    "create new risks",
    "open new opportunities",
    "be measured and monitored",
    "need to be governed",
];

/// First 8 bytes (little-endian) of
/// `SHA-256(seed_le || len(part_0)_le || part_0 || len(part_1)_le || ...)`,
/// lengths as `u64`.
pub fn mock_hash(seed: u64, parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for part in parts {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part);
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// The rating the mock gives agent `agent_index` for closed question
/// `question_id`: `mock_hash(seed, ["rating", agent, question]) mod 5 + 1`.
pub fn mock_rating(seed: u64, agent_index: usize, question_id: QuestionId) -> u8 {
    let h = mock_hash(
        seed,
        &[
            b"rating",
            &(agent_index as u64).to_le_bytes(),
            &question_id.0.to_le_bytes(),
        ],
    );
    (h % 5) as u8 + 1
}

fn unit_interval(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

#[derive(Debug, Default)]
pub struct MockBackend {
    seed: u64,
    embedding_dim: usize,
    unparseable_rating_rate: f64,
    constant_rating: Option<u8>,
    latency: Option<Duration>,
    fail_marker: Option<String>,
    in_flight: AtomicUsize,
    peak_in_flight: AtomicUsize,
    calls: AtomicUsize,
}

impl MockBackend {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            embedding_dim: 64,
            ..Self::default()
        }
    }

    pub fn with_embedding_dim(mut self, dim: usize) -> Self {
        self.embedding_dim = dim.max(1);
        self
    }

    /// Probability that any single rating reply is unparseable.
    pub fn with_unparseable_rating_rate(mut self, rate: f64) -> Self {
        self.unparseable_rating_rate = rate.clamp(0.0, 1.0);
        self
    }

    /// Every rating reply becomes `value`.
    pub fn with_constant_rating(mut self, value: u8) -> Self {
        self.constant_rating = Some(value);
        self
    }

    /// Sleeps this long inside every call so concurrency is observable.
    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = Some(latency);
        self
    }

    /// Any completion whose user prompt contains `marker` fails.
    pub fn fail_when_prompt_contains(mut self, marker: impl Into<String>) -> Self {
        self.fail_marker = Some(marker.into());
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn peak_in_flight(&self) -> usize {
        self.peak_in_flight.load(Ordering::SeqCst)
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    async fn enter(&self) -> InFlightGuard<'_> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak_in_flight.fetch_max(now, Ordering::SeqCst);
        let guard = InFlightGuard(&self.in_flight);
        if let Some(latency) = self.latency {
            tokio::time::sleep(latency).await;
        }
        guard
    }

    fn request_rng(&self, request: &ChatRequest) -> ChaCha8Rng {
        let tag = serde_json::to_vec(&request.tag).unwrap_or_default();
        ChaCha8Rng::seed_from_u64(mock_hash(
            self.seed,
            &[
                &tag,
                request.system_prompt.as_bytes(),
                request.user_prompt.as_bytes(),
            ],
        ))
    }

    fn reply(&self, request: &ChatRequest) -> String {
        let mut rng = self.request_rng(request);
        match &request.tag {
            RequestTag::OpenAnswer { .. } => {
                let t1 = THEMES.choose(&mut rng).copied().unwrap_or_default();
                let t2 = THEMES.choose(&mut rng).copied().unwrap_or_default();
                let claim = CLAIMS.choose(&mut rng).copied().unwrap_or_default();
                let who = STAKEHOLDERS.choose(&mut rng).copied().unwrap_or_default();
                format!(
                    "I expect {t1} to {claim}. The decisive factor will be {t2} for {who}."
                )
            }
            RequestTag::Rating {
                agent_index,
                question_id,
                attempt,
            } => {
                let garble = mock_hash(
                    self.seed,
                    &[
                        b"garble",
                        &(*agent_index as u64).to_le_bytes(),
                        &question_id.0.to_le_bytes(),
                        &attempt.to_le_bytes(),
                    ],
                );
                if unit_interval(garble) < self.unparseable_rating_rate {
                    return "It depends on too many factors to commit.".into();
                }
                let value = self
                    .constant_rating
                    .unwrap_or_else(|| mock_rating(self.seed, *agent_index, *question_id));
                match rng.random_range(0..3) {
                    0 => value.to_string(),
                    1 => format!("Rating: {value}"),
                    _ => format!("I would rate this {value}."),
                }
            }
            RequestTag::SurveyGeneration { requested, .. } => {
                let space = THEMES.len() * CLAIMS.len();
                let picks = index::sample(&mut rng, space, (*requested).min(space));
                let mut out = String::from("Closed statements for the panel:\n");
                for i in picks {
                    let theme = THEMES[i / CLAIMS.len()];
                    let claim = CLAIMS[i % CLAIMS.len()];
                    out.push_str(&format!("- {} will {claim} by 2035.\n", capitalize(theme)));
                }
                out
            }
            RequestTag::Regeneration { requested, .. } => {
                let per_theme = STAKEHOLDERS.len() * ANGLES.len();
                let space = THEMES.len() * per_theme;
                let picks = index::sample(&mut rng, space, (*requested).min(space));
                let mut out = String::new();
                for i in picks {
                    let theme = THEMES[i / per_theme];
                    let who = STAKEHOLDERS[(i % per_theme) / ANGLES.len()];
                    let angle = ANGLES[i % ANGLES.len()];
                    out.push_str(&format!("- How will {theme} {angle} for {who}?\n"));
                }
                out
            }
            RequestTag::Summary { topic } => {
                let lower = request.user_prompt.to_lowercase();
                let present: Vec<&str> = THEMES
                    .iter()
                    .copied()
                    .filter(|t| lower.contains(t))
                    .collect();
                let take = if present.len() <= 3 {
                    present.len()
                } else {
                    rng.random_range(3..=present.len().min(8))
                };
                let mut out = format!("Summary of the Delphi study on \"{topic}\".");
                for i in index::sample(&mut rng, present.len(), take).into_iter() {
                    let claim = CLAIMS.choose(&mut rng).copied().unwrap_or_default();
                    out.push_str(&format!(" The panel expects {} to {claim}.", present[i]));
                }
                if take == 0 {
                    out.push_str(" The panel did not converge on any dominant scenario.");
                }
                out
            }
            RequestTag::Other => {
                format!("Acknowledged ({:016x}).", rng.random::<u64>())
            }
        }
    }

    /// Deterministic unit vector for `text`.
    pub fn embed_text(&self, text: &str) -> Vec<f64> {
        let mut rng =
            ChaCha8Rng::seed_from_u64(mock_hash(self.seed, &[b"embed", text.as_bytes()]));
        loop {
            let v: Vec<f64> = (0..self.embedding_dim)
                .map(|_| rng.sample(StandardNormal))
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                return v.into_iter().map(|x| x / norm).collect();
            }
        }
    }
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

struct InFlightGuard<'a>(&'a AtomicUsize);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

#[async_trait]
impl Backend for MockBackend {
    async fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.validate()?;
        let _guard = self.enter().await;
        if let Some(marker) = &self.fail_marker {
            if request.user_prompt.contains(marker.as_str()) {
                return Err(BackendError::Unavailable {
                    attempts: 1,
                    last: format!("injected failure for `{marker}`"),
                });
            }
        }
        let mut response = ChatResponse {
            text: self.reply(request),
            ..ChatResponse::default()
        };
        response
            .provider_metadata
            .insert("provider".into(), serde_json::Value::from("mock"));
        Ok(response)
    }

    async fn embed(&self, request: &EmbeddingRequest) -> Result<EmbeddingResponse, BackendError> {
        if request.texts.is_empty() {
            return Err(BackendError::InvalidRequest("no texts to embed".into()));
        }
        let _guard = self.enter().await;
        Ok(EmbeddingResponse {
            vectors: request.texts.iter().map(|t| self.embed_text(t)).collect(),
        })
    }
}
