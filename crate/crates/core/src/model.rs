//! Domain types shared across the engine.
//!
//! Every type here is a plain value object: constructed once, then cloned or
//! borrowed. The transcript schema is the serde representation of these types.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The Likert scale upper bound. Stored in configs so transcripts describe
/// themselves, but nothing other than 5 validates.
pub const RATING_SCALE_MAX: u8 = 5;

pub const DEFAULT_DUPLICATE_THRESHOLD: f64 = 0.85;
pub const DEFAULT_TEMPERATURE: f64 = 0.7;
pub const DEFAULT_NUM_ROUNDS: usize = 5;

const PROBABILITY_TOLERANCE: f64 = 1e-9;

/// Study-scoped question identifier. Open and closed questions share one
/// monotonically increasing counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QuestionId(pub u64);

impl fmt::Display for QuestionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "q{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryOption {
    pub label: String,
    pub probability: f64,
}

/// Ordered categorical distribution. Order matters: sampling walks the
/// cumulative sum in declaration order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CategoricalDistribution {
    pub options: Vec<CategoryOption>,
}

impl CategoricalDistribution {
    pub fn new<L: Into<String>>(options: impl IntoIterator<Item = (L, f64)>) -> Self {
        Self {
            options: options
                .into_iter()
                .map(|(label, probability)| CategoryOption {
                    label: label.into(),
                    probability,
                })
                .collect(),
        }
    }

    pub fn contains(&self, label: &str) -> bool {
        self.options.iter().any(|o| o.label == label)
    }

    fn violations(&self, attribute: PersonaAttribute, out: &mut Vec<ConfigViolation>) {
        if self.options.is_empty() {
            out.push(ConfigViolation::EmptyDistribution { attribute });
            return;
        }
        let mut seen = BTreeSet::new();
        for option in &self.options {
            if option.label.trim().is_empty() {
                out.push(ConfigViolation::EmptyLabel { attribute });
            } else if !seen.insert(option.label.as_str()) {
                out.push(ConfigViolation::DuplicateLabel {
                    attribute,
                    label: option.label.clone(),
                });
            }
            if !(0.0..=1.0).contains(&option.probability) || !option.probability.is_finite() {
                out.push(ConfigViolation::ProbabilityOutOfRange {
                    attribute,
                    label: option.label.clone(),
                    probability: option.probability,
                });
            }
        }
        let sum: f64 = self.options.iter().map(|o| o.probability).sum();
        if (sum - 1.0).abs() > PROBABILITY_TOLERANCE {
            out.push(ConfigViolation::InvalidDistribution { attribute, sum });
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PersonaAttribute {
    Nationality,
    Education,
    ExperienceType,
    ExperienceField,
    Specialization,
}

impl PersonaAttribute {
    /// Sampling order. Changing it changes every seeded panel.
    pub const ALL: [PersonaAttribute; 5] = [
        PersonaAttribute::Nationality,
        PersonaAttribute::Education,
        PersonaAttribute::ExperienceType,
        PersonaAttribute::ExperienceField,
        PersonaAttribute::Specialization,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PersonaAttribute::Nationality => "nationality",
            PersonaAttribute::Education => "education",
            PersonaAttribute::ExperienceType => "experience_type",
            PersonaAttribute::ExperienceField => "experience_field",
            PersonaAttribute::Specialization => "specialization",
        }
    }
}

impl fmt::Display for PersonaAttribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One distribution per persona attribute. This is also the on-disk persona
/// catalog format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelDistributions {
    pub nationality: CategoricalDistribution,
    pub education: CategoricalDistribution,
    pub experience_type: CategoricalDistribution,
    pub experience_field: CategoricalDistribution,
    pub specialization: CategoricalDistribution,
}

impl PanelDistributions {
    pub fn get(&self, attribute: PersonaAttribute) -> &CategoricalDistribution {
        match attribute {
            PersonaAttribute::Nationality => &self.nationality,
            PersonaAttribute::Education => &self.education,
            PersonaAttribute::ExperienceType => &self.experience_type,
            PersonaAttribute::ExperienceField => &self.experience_field,
            PersonaAttribute::Specialization => &self.specialization,
        }
    }

    pub fn violations(&self) -> Vec<ConfigViolation> {
        let mut out = Vec::new();
        for attribute in PersonaAttribute::ALL {
            self.get(attribute).violations(attribute, &mut out);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertProfile {
    pub agent_index: usize,
    pub nationality: String,
    pub education: String,
    pub experience_type: String,
    pub experience_field: String,
    pub specialization: String,
}

impl ExpertProfile {
    pub fn attribute(&self, attribute: PersonaAttribute) -> &str {
        match attribute {
            PersonaAttribute::Nationality => &self.nationality,
            PersonaAttribute::Education => &self.education,
            PersonaAttribute::ExperienceType => &self.experience_type,
            PersonaAttribute::ExperienceField => &self.experience_field,
            PersonaAttribute::Specialization => &self.specialization,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendSelector {
    Http,
    #[default]
    Mock,
}

impl std::str::FromStr for BackendSelector {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "http" => Ok(BackendSelector::Http),
            "mock" => Ok(BackendSelector::Mock),
            other => Err(format!("unknown backend `{other}` (expected `http` or `mock`)")),
        }
    }
}

/// Provider wire settings for the HTTP backend. The API key is never stored
/// here; it comes from `DELPHI_API_KEY`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderSettings {
    pub base_url: String,
    pub chat_model: String,
    pub embedding_model: String,
    pub max_answer_tokens: u32,
    pub max_organizer_tokens: u32,
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub request_timeout_secs: u64,
}

impl Default for ProviderSettings {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            chat_model: "gpt-4o-mini-2024-07-18".into(),
            embedding_model: "text-embedding-3-small".into(),
            max_answer_tokens: 150,
            max_organizer_tokens: 1200,
            max_attempts: 5,
            base_delay_ms: 500,
            request_timeout_secs: 120,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockSettings {
    pub embedding_dim: usize,
    /// Fraction of first-attempt rating replies the mock garbles, to exercise
    /// the reprompt and abstention paths.
    pub unparseable_rating_rate: f64,
}

impl Default for MockSettings {
    fn default() -> Self {
        Self {
            embedding_dim: 64,
            unparseable_rating_rate: 0.0,
        }
    }
}

/// Fifteen general-purpose opening questions about generative AI, enough for
/// every cell of the agents-by-questions grid.
pub fn default_initial_questions() -> Vec<String> {
    serde_json::from_str(include_str!("../data/initial_questions.json"))
        .expect("bundled question list is valid JSON")
}

fn default_threshold() -> f64 {
    DEFAULT_DUPLICATE_THRESHOLD
}
fn default_scale() -> u8 {
    RATING_SCALE_MAX
}
fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}
fn default_rounds() -> usize {
    DEFAULT_NUM_ROUNDS
}
fn default_one() -> usize {
    1
}
fn default_parallelism() -> usize {
    8
}
fn default_chunk_chars() -> usize {
    12_000
}
fn default_context_budget() -> usize {
    6_000
}

/// Full input of one study. Serialized field-for-field as the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub topic: String,
    pub initial_open_questions: Vec<String>,
    /// Number of responding agents.
    pub num_agents: usize,
    /// Open questions each agent answers per round.
    pub questions_per_agent: usize,
    #[serde(default = "default_rounds")]
    pub num_rounds: usize,
    pub max_open_questions: usize,
    pub max_closed_questions: usize,
    #[serde(default = "default_threshold")]
    pub duplicate_threshold: f64,
    #[serde(default = "default_scale")]
    pub rating_scale_max: u8,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    pub panel_distributions: PanelDistributions,
    pub rng_seed: u64,
    #[serde(default = "default_one")]
    pub num_repeats: usize,
    #[serde(default)]
    pub backend_selector: BackendSelector,
    /// Maximum requests in flight inside one batch.
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    /// Maximum studies executed concurrently by the CLI.
    #[serde(default = "default_one")]
    pub parallel_runs: usize,
    /// Open responses are split into organizer requests of at most this many
    /// characters.
    #[serde(default = "default_chunk_chars")]
    pub organizer_chunk_chars: usize,
    /// Estimated-token budget for the final summary digest.
    #[serde(default = "default_context_budget")]
    pub context_budget_tokens: usize,
    #[serde(default)]
    pub provider: ProviderSettings,
    #[serde(default)]
    pub mock: MockSettings,
}

impl StudyConfig {
    /// Config for one cell of the agents-by-questions experiment grid, with
    /// both retention caps tied to `questions_per_agent`.
    pub fn for_grid(
        topic: impl Into<String>,
        initial_open_questions: Vec<String>,
        num_agents: usize,
        questions_per_agent: usize,
        panel_distributions: PanelDistributions,
        rng_seed: u64,
    ) -> Self {
        Self {
            topic: topic.into(),
            initial_open_questions,
            num_agents,
            questions_per_agent,
            num_rounds: DEFAULT_NUM_ROUNDS,
            max_open_questions: questions_per_agent,
            max_closed_questions: questions_per_agent,
            duplicate_threshold: DEFAULT_DUPLICATE_THRESHOLD,
            rating_scale_max: RATING_SCALE_MAX,
            temperature: DEFAULT_TEMPERATURE,
            panel_distributions,
            rng_seed,
            num_repeats: 1,
            backend_selector: BackendSelector::Mock,
            parallelism: default_parallelism(),
            parallel_runs: 1,
            organizer_chunk_chars: default_chunk_chars(),
            context_budget_tokens: default_context_budget(),
            provider: ProviderSettings::default(),
            mock: MockSettings::default(),
        }
    }

    /// Checks every invariant and reports all violations at once.
    pub fn validate(self) -> Result<Self, ConfigError> {
        let violations = self.violations();
        if violations.is_empty() {
            Ok(self)
        } else {
            Err(ConfigError { violations })
        }
    }

    pub fn violations(&self) -> Vec<ConfigViolation> {
        let mut out = Vec::new();
        if self.topic.trim().is_empty() {
            out.push(ConfigViolation::EmptyTopic);
        }
        if self.initial_open_questions.is_empty() {
            out.push(ConfigViolation::EmptyQuestionSet);
        }
        if self.initial_open_questions.iter().any(|q| q.trim().is_empty()) {
            out.push(ConfigViolation::BlankQuestion);
        }
        for (field, value) in [
            ("num_agents", self.num_agents),
            ("questions_per_agent", self.questions_per_agent),
            ("num_rounds", self.num_rounds),
            ("max_open_questions", self.max_open_questions),
            ("max_closed_questions", self.max_closed_questions),
            ("num_repeats", self.num_repeats),
            ("parallelism", self.parallelism),
            ("parallel_runs", self.parallel_runs),
            ("organizer_chunk_chars", self.organizer_chunk_chars),
            ("context_budget_tokens", self.context_budget_tokens),
            ("mock.embedding_dim", self.mock.embedding_dim),
        ] {
            if value == 0 {
                out.push(ConfigViolation::NonPositiveCount { field });
            }
        }
        if !(self.duplicate_threshold > 0.0 && self.duplicate_threshold <= 1.0) {
            out.push(ConfigViolation::ThresholdOutOfRange {
                value: self.duplicate_threshold,
            });
        }
        if self.rating_scale_max != RATING_SCALE_MAX {
            out.push(ConfigViolation::UnsupportedScale {
                value: self.rating_scale_max,
            });
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            out.push(ConfigViolation::NegativeTemperature {
                value: self.temperature,
            });
        }
        if !(0.0..=1.0).contains(&self.mock.unparseable_rating_rate) {
            out.push(ConfigViolation::RateOutOfRange {
                value: self.mock.unparseable_rating_rate,
            });
        }
        if self.provider.max_attempts == 0 {
            out.push(ConfigViolation::NonPositiveCount {
                field: "provider.max_attempts",
            });
        }
        out.extend(self.panel_distributions.violations());
        out
    }

    /// Seed for repeat `run_index`. Repeats share one config and diverge only
    /// through this derivation.
    pub fn run_seed(&self, run_index: usize) -> u64 {
        splitmix64(self.rng_seed ^ splitmix64(run_index as u64 + 1))
    }

    /// Round-one open questions: the seeded list truncated to
    /// `questions_per_agent`.
    pub fn round_one_questions(&self) -> &[String] {
        let n = self.initial_open_questions.len().min(self.questions_per_agent);
        &self.initial_open_questions[..n]
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigViolation {
    #[error("{attribute}: probabilities sum to {sum}, expected 1")]
    InvalidDistribution { attribute: PersonaAttribute, sum: f64 },
    #[error("{attribute}: distribution has no options")]
    EmptyDistribution { attribute: PersonaAttribute },
    #[error("{attribute}: empty option label")]
    EmptyLabel { attribute: PersonaAttribute },
    #[error("{attribute}: duplicate option label `{label}`")]
    DuplicateLabel {
        attribute: PersonaAttribute,
        label: String,
    },
    #[error("{attribute}: probability {probability} of `{label}` is outside [0, 1]")]
    ProbabilityOutOfRange {
        attribute: PersonaAttribute,
        label: String,
        probability: f64,
    },
    #[error("initial_open_questions is empty")]
    EmptyQuestionSet,
    #[error("initial_open_questions contains a blank question")]
    BlankQuestion,
    #[error("topic is empty")]
    EmptyTopic,
    #[error("{field} must be at least 1")]
    NonPositiveCount { field: &'static str },
    #[error("duplicate_threshold {value} is outside (0, 1]")]
    ThresholdOutOfRange { value: f64 },
    #[error("rating_scale_max {value} is unsupported; only 5 is allowed")]
    UnsupportedScale { value: u8 },
    #[error("temperature {value} must be a finite value >= 0")]
    NegativeTemperature { value: f64 },
    #[error("mock.unparseable_rating_rate {value} is outside [0, 1]")]
    RateOutOfRange { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid study config ({} violation(s)): {}", violations.len(), render_violations(violations))]
pub struct ConfigError {
    pub violations: Vec<ConfigViolation>,
}

fn render_violations(violations: &[ConfigViolation]) -> String {
    violations
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionOrigin {
    Seeded,
    Generated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpenQuestion {
    pub question_id: QuestionId,
    pub text: String,
    /// 0 for seeded questions, otherwise the round whose ratings produced it.
    pub round_created: u32,
    pub origin: QuestionOrigin,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpenResponse {
    pub agent_index: usize,
    pub question_id: QuestionId,
    pub text: String,
    pub round: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClosedQuestion {
    pub question_id: QuestionId,
    pub text: String,
    pub round: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rating {
    pub agent_index: usize,
    pub question_id: QuestionId,
    pub value: u8,
}

/// A rating that could not be parsed after one reprompt. Excluded from
/// aggregates rather than replaced by a default.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Abstention {
    pub agent_index: usize,
    pub question_id: QuestionId,
    pub last_reply: String,
}

/// Per-question rating statistics. `std_dev` is the population form
/// (divides by `count`) and is reported only; it never feeds back into
/// prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingAggregate {
    pub question_id: QuestionId,
    pub mean: f64,
    pub std_dev: f64,
    pub count: usize,
    /// Counts for values 1..=5.
    pub histogram: [usize; RATING_SCALE_MAX as usize],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterStage {
    /// Removed by the cosine-threshold duplicate filter.
    Threshold,
    /// Removed by iterative highest-mean-similarity pruning.
    Prune,
}

/// Audit entry for one question removed by a dedup filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub question_id: QuestionId,
    pub stage: FilterStage,
    /// Threshold stage: similarity to the retained question that beat it.
    /// Prune stage: its mean similarity to the remaining set when removed.
    pub similarity: f64,
    pub matched_question_id: Option<QuestionId>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round_number: u32,
    pub open_questions: Vec<OpenQuestion>,
    pub open_responses: Vec<OpenResponse>,
    pub candidate_closed: Vec<ClosedQuestion>,
    pub closed_questions: Vec<ClosedQuestion>,
    pub closed_filter_log: Vec<FilterDecision>,
    pub ratings: Vec<Rating>,
    pub abstentions: Vec<Abstention>,
    /// Closed questions for which every agent abstained.
    pub all_abstained: Vec<QuestionId>,
    pub aggregates: Vec<RatingAggregate>,
    pub candidate_next_open: Vec<OpenQuestion>,
    pub retained_next_open: Vec<OpenQuestion>,
    pub open_filter_log: Vec<FilterDecision>,
}

impl RoundRecord {
    /// Checks the cardinality invariants of a completed round.
    pub fn cardinality_violations(
        &self,
        num_agents: usize,
        max_open: usize,
        max_closed: usize,
    ) -> Vec<String> {
        let mut out = Vec::new();
        let r = self.round_number;
        if self.retained_next_open.len() > max_open {
            out.push(format!(
                "round {r}: {} retained open questions exceed cap {max_open}",
                self.retained_next_open.len()
            ));
        }
        if self.closed_questions.len() > max_closed {
            out.push(format!(
                "round {r}: {} closed questions exceed cap {max_closed}",
                self.closed_questions.len()
            ));
        }
        if self.open_responses.len() != self.open_questions.len() * num_agents {
            out.push(format!(
                "round {r}: {} open responses, expected {}",
                self.open_responses.len(),
                self.open_questions.len() * num_agents
            ));
        }
        if self.ratings.len() + self.abstentions.len() != self.closed_questions.len() * num_agents {
            out.push(format!(
                "round {r}: {} ratings + {} abstentions, expected {}",
                self.ratings.len(),
                self.abstentions.len(),
                self.closed_questions.len() * num_agents
            ));
        }
        let pairs: BTreeSet<_> = self
            .open_responses
            .iter()
            .map(|resp| (resp.agent_index, resp.question_id))
            .collect();
        if pairs.len() != self.open_responses.len() {
            out.push(format!("round {r}: duplicate (agent, open question) response"));
        }
        let rated: BTreeSet<_> = self
            .ratings
            .iter()
            .map(|x| (x.agent_index, x.question_id))
            .chain(self.abstentions.iter().map(|x| (x.agent_index, x.question_id)))
            .collect();
        if rated.len() != self.ratings.len() + self.abstentions.len() {
            out.push(format!("round {r}: duplicate (agent, closed question) rating"));
        }
        if let Some(bad) = self
            .ratings
            .iter()
            .find(|x| !(1..=RATING_SCALE_MAX).contains(&x.value))
        {
            out.push(format!("round {r}: rating value {} out of range", bad.value));
        }
        out
    }
}

/// Transcript of one complete study run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub config_snapshot: StudyConfig,
    pub run_index: usize,
    pub run_seed: u64,
    pub panel: Vec<ExpertProfile>,
    pub rounds: Vec<RoundRecord>,
    pub summary_text: String,
    /// SHA-256 of every prompt template used, keyed by template name.
    pub template_hashes: BTreeMap<String, String>,
}
