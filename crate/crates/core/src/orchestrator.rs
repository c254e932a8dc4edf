//! The Delphi round loop.
//!
//! A study is a [`StudyState`] advanced one phase at a time:
//!
//! ```text
//! AwaitingOpenAnswers -> AwaitingSurveyGeneration -> AwaitingRatings
//!     -> AwaitingRegeneration -> (AwaitingOpenAnswers | Summarizing) -> Done
//! ```
//!
//! The loop always runs exactly `num_rounds` rounds; there is no consensus
//! stop. After every phase the state is checkpointed, so an interrupted run
//! resumes from the last completed phase and, on the mock backend, finishes
//! with the same transcript bytes as an uninterrupted run.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::backend::http::HttpBackend;
use crate::backend::mock::MockBackend;
use crate::backend::{
    run_batch, Backend, BackendError, BatchElementFailed, ChatRequest, EmbeddingRequest,
    RequestTag,
};
use crate::dedup::{filter_threshold, prune_to_count, DedupError, EmbeddedQuestion, Removal};
use crate::model::{
    Abstention, BackendSelector, ClosedQuestion, ConfigError, ExpertProfile, FilterDecision,
    FilterStage, OpenQuestion, OpenResponse, QuestionId, QuestionOrigin, Rating, RatingAggregate,
    RoundRecord, StudyConfig, StudyResult,
};
use crate::persistence::{
    self, Checkpoint, JsonlWriter, PersistenceError, CHECKPOINT_FILE, CONFIG_FILE,
    PROMPT_LOG_FILE, PROVIDER_LOG_FILE, TRANSCRIPT_FILE,
};
use crate::persona::{panel_for_run, render_responder_prompt};
use crate::prompts::{self, format_mean, parse_list_items, parse_rating};
use crate::stats::aggregate_ratings;

const EMBED_CHUNK: usize = 256;
const RATING_MAX_TOKENS: u32 = 16;
const CHARS_PER_TOKEN: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    AwaitingOpenAnswers,
    AwaitingSurveyGeneration,
    AwaitingRatings,
    AwaitingRegeneration,
    Summarizing,
    Done,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Phase::AwaitingOpenAnswers => "awaiting_open_answers",
            Phase::AwaitingSurveyGeneration => "awaiting_survey_generation",
            Phase::AwaitingRatings => "awaiting_ratings",
            Phase::AwaitingRegeneration => "awaiting_regeneration",
            Phase::Summarizing => "summarizing",
            Phase::Done => "done",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("round {round}, {phase}: {source}")]
    Batch {
        round: u32,
        phase: Phase,
        #[source]
        source: BatchElementFailed,
    },
    #[error("round {round}, {phase}: {source}")]
    Backend {
        round: u32,
        phase: Phase,
        #[source]
        source: BackendError,
    },
    #[error("round {round}, {phase}: organizer output could not be parsed after a reprompt")]
    UnparseableOrganizerOutput { round: u32, phase: Phase },
    #[error("round {round}, {phase}: no questions left after filtering")]
    EmptyQuestionSetAfterFiltering { round: u32, phase: Phase },
    #[error("round {round}, {phase}: {source}")]
    Dedup {
        round: u32,
        phase: Phase,
        #[source]
        source: DedupError,
    },
    #[error(transparent)]
    Persistence(#[from] PersistenceError),
    #[error("halted at round {round}, {phase} (checkpoint written)")]
    Halted { round: u32, phase: Phase },
    #[error("study is already complete")]
    AlreadyComplete,
    #[error("no checkpoint at {0}")]
    NoCheckpoint(PathBuf),
    #[error("operation requires phase {expected}, study is in {actual}")]
    WrongPhase { expected: Phase, actual: Phase },
}

impl OrchestratorError {
    /// Round and phase the error occurred in, when known.
    pub fn location(&self) -> Option<(u32, Phase)> {
        match self {
            OrchestratorError::Batch { round, phase, .. }
            | OrchestratorError::Backend { round, phase, .. }
            | OrchestratorError::UnparseableOrganizerOutput { round, phase }
            | OrchestratorError::EmptyQuestionSetAfterFiltering { round, phase }
            | OrchestratorError::Dedup { round, phase, .. }
            | OrchestratorError::Halted { round, phase } => Some((*round, *phase)),
            _ => None,
        }
    }
}

/// Complete, serializable state of a study between phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyState {
    pub config: StudyConfig,
    pub run_index: usize,
    pub run_seed: u64,
    pub panel: Vec<ExpertProfile>,
    pub completed_rounds: Vec<RoundRecord>,
    /// The round being filled in, from open answers until regeneration.
    pub current_round: Option<RoundRecord>,
    pub pending_open_questions: Vec<OpenQuestion>,
    pub phase: Phase,
    pub next_question_id: u64,
    pub summary_text: Option<String>,
}

impl StudyState {
    /// Validates the config, samples the panel from the repeat's derived seed
    /// and seeds round one with the initial open questions.
    pub fn new(config: StudyConfig, run_index: usize) -> Result<Self, ConfigError> {
        let config = config.validate()?;
        let run_seed = config.run_seed(run_index);
        let panel = panel_for_run(&config, run_seed);
        let pending: Vec<OpenQuestion> = config
            .round_one_questions()
            .iter()
            .enumerate()
            .map(|(i, text)| OpenQuestion {
                question_id: QuestionId(i as u64),
                text: text.trim().to_string(),
                round_created: 0,
                origin: QuestionOrigin::Seeded,
            })
            .collect();
        Ok(Self {
            next_question_id: pending.len() as u64,
            config,
            run_index,
            run_seed,
            panel,
            completed_rounds: Vec::new(),
            current_round: None,
            pending_open_questions: pending,
            phase: Phase::AwaitingOpenAnswers,
            summary_text: None,
        })
    }

    /// Round number the state is working on (or about to start).
    pub fn round_number(&self) -> u32 {
        match &self.current_round {
            Some(r) => r.round_number,
            None => self.completed_rounds.len() as u32 + 1,
        }
    }

    fn allocate_id(&mut self) -> QuestionId {
        let id = QuestionId(self.next_question_id);
        self.next_question_id += 1;
        id
    }

    fn expect_phase(&self, expected: Phase) -> Result<(), OrchestratorError> {
        if self.phase == expected {
            Ok(())
        } else {
            Err(OrchestratorError::WrongPhase {
                expected,
                actual: self.phase,
            })
        }
    }

    fn current(&mut self) -> &mut RoundRecord {
        self.current_round
            .as_mut()
            .expect("a round is in progress between open answers and regeneration")
    }

    pub fn into_result(self) -> StudyResult {
        StudyResult {
            config_snapshot: self.config,
            run_index: self.run_index,
            run_seed: self.run_seed,
            panel: self.panel,
            rounds: self.completed_rounds,
            summary_text: self.summary_text.unwrap_or_default(),
            template_hashes: prompts::template_hashes(),
        }
    }
}

/// One prompt/response pair, as written to `prompts.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub tag: RequestTag,
    pub system_prompt: String,
    pub user_prompt: String,
    pub response: String,
}

fn organizer_system(config: &StudyConfig) -> String {
    prompts::ORGANIZER_SYSTEM
        .render(&[("topic", &config.topic)])
        .expect("organizer template variables are fixed")
}

fn request(config: &StudyConfig, system: String, user: String, max_tokens: u32, tag: RequestTag) -> ChatRequest {
    ChatRequest {
        system_prompt: system,
        user_prompt: user,
        temperature: config.temperature,
        max_output_tokens: max_tokens.max(1),
        tag,
    }
}

async fn batch(
    backend: &dyn Backend,
    requests: Vec<ChatRequest>,
    parallelism: usize,
    log: &mut Vec<Exchange>,
    round: u32,
    phase: Phase,
) -> Result<Vec<String>, OrchestratorError> {
    let responses = run_batch(backend, &requests, parallelism)
        .await
        .map_err(|source| OrchestratorError::Batch {
            round,
            phase,
            source,
        })?;
    let texts: Vec<String> = responses.into_iter().map(|r| r.text).collect();
    log.extend(requests.into_iter().zip(&texts).map(|(req, text)| Exchange {
        tag: req.tag,
        system_prompt: req.system_prompt,
        user_prompt: req.user_prompt,
        response: text.clone(),
    }));
    Ok(texts)
}

async fn embed_all(
    backend: &dyn Backend,
    texts: &[String],
    round: u32,
    phase: Phase,
) -> Result<Vec<Vec<f64>>, OrchestratorError> {
    let mut out = Vec::with_capacity(texts.len());
    for chunk in texts.chunks(EMBED_CHUNK) {
        let req = EmbeddingRequest {
            texts: chunk.to_vec(),
        };
        let resp = backend
            .embed(&req)
            .await
            .and_then(|resp| crate::backend::validate_embeddings(&req, &resp).map(|_| resp))
            .map_err(|source| OrchestratorError::Backend {
                round,
                phase,
                source,
            })?;
        out.extend(resp.vectors);
    }
    Ok(out)
}

/// Result of the two-stage filter on a candidate list.
struct Filtered {
    kept: Vec<QuestionId>,
    log: Vec<FilterDecision>,
}

async fn dedup_candidates(
    backend: &dyn Backend,
    candidates: &[(QuestionId, String)],
    threshold: f64,
    cap: usize,
    round: u32,
    phase: Phase,
) -> Result<Filtered, OrchestratorError> {
    let texts: Vec<String> = candidates.iter().map(|(_, t)| t.clone()).collect();
    let vectors = embed_all(backend, &texts, round, phase).await?;
    let embedded: Vec<EmbeddedQuestion<f64>> = candidates
        .iter()
        .zip(vectors)
        .map(|((id, _), v)| EmbeddedQuestion::new(*id, v))
        .collect();
    let dedup_err = |source| OrchestratorError::Dedup {
        round,
        phase,
        source,
    };
    let first = filter_threshold(&embedded, threshold).map_err(dedup_err)?;
    let second = prune_to_count(&first.kept, cap).map_err(dedup_err)?;
    let log = first
        .removed
        .iter()
        .chain(&second.removed)
        .map(|r| match *r {
            Removal::Duplicate {
                question_id,
                kept,
                similarity,
            } => FilterDecision {
                question_id,
                stage: FilterStage::Threshold,
                similarity,
                matched_question_id: Some(kept),
            },
            Removal::MostRedundant {
                question_id,
                mean_similarity,
            } => FilterDecision {
                question_id,
                stage: FilterStage::Prune,
                similarity: mean_similarity,
                matched_question_id: None,
            },
        })
        .collect();
    Ok(Filtered {
        kept: second.kept_ids(),
        log,
    })
}

/// Asks the organizer for list output; requests whose output has no list
/// items are reprompted once with a format reminder.
async fn organizer_lists(
    backend: &dyn Backend,
    requests: Vec<ChatRequest>,
    parallelism: usize,
    log: &mut Vec<Exchange>,
    round: u32,
    phase: Phase,
) -> Result<Vec<Vec<String>>, OrchestratorError> {
    let originals = requests.clone();
    let replies = batch(backend, requests, parallelism, log, round, phase).await?;
    let mut items: Vec<Vec<String>> = replies.iter().map(|r| parse_list_items(r)).collect();
    let retry_idx: Vec<usize> = (0..items.len()).filter(|&i| items[i].is_empty()).collect();
    if retry_idx.is_empty() {
        return Ok(items);
    }
    let reminder = prompts::FORMAT_REMINDER
        .render(&[])
        .expect("reminder has no variables");
    let retries: Vec<ChatRequest> = retry_idx
        .iter()
        .map(|&i| {
            let mut r = originals[i].clone();
            r.user_prompt = format!("{}\n\n{reminder}", r.user_prompt);
            r
        })
        .collect();
    let replies = batch(backend, retries, parallelism, log, round, phase).await?;
    for (&i, reply) in retry_idx.iter().zip(&replies) {
        items[i] = parse_list_items(reply);
        if items[i].is_empty() {
            return Err(OrchestratorError::UnparseableOrganizerOutput { round, phase });
        }
    }
    Ok(items)
}

/// One completion per (agent, open question), agent-major.
pub async fn elicit_open_answers(
    state: &StudyState,
    backend: &dyn Backend,
    parallelism: usize,
    log: &mut Vec<Exchange>,
) -> Result<Vec<OpenResponse>, OrchestratorError> {
    state.expect_phase(Phase::AwaitingOpenAnswers)?;
    let round = state.round_number();
    let config = &state.config;
    let questions = &state.pending_open_questions;
    if questions.is_empty() {
        return Err(OrchestratorError::EmptyQuestionSetAfterFiltering {
            round,
            phase: state.phase,
        });
    }
    let mut requests = Vec::with_capacity(state.panel.len() * questions.len());
    for profile in &state.panel {
        let system = render_responder_prompt(profile, &config.topic);
        for q in questions {
            let user = prompts::OPEN_ANSWER
                .render(&[("question", &q.text)])
                .expect("open answer template variables are fixed");
            requests.push(request(
                config,
                system.clone(),
                user,
                config.provider.max_answer_tokens,
                RequestTag::OpenAnswer {
                    agent_index: profile.agent_index,
                    question_id: q.question_id,
                },
            ));
        }
    }
    let tags: Vec<(usize, QuestionId)> = requests
        .iter()
        .map(|r| match r.tag {
            RequestTag::OpenAnswer {
                agent_index,
                question_id,
            } => (agent_index, question_id),
            _ => unreachable!("built above"),
        })
        .collect();
    let texts = batch(backend, requests, parallelism, log, round, state.phase).await?;
    Ok(tags
        .into_iter()
        .zip(texts)
        .map(|((agent_index, question_id), text)| OpenResponse {
            agent_index,
            question_id,
            text: text.trim().to_string(),
            round,
        })
        .collect())
}

/// Splits rendered response lines into chunks of at most `max_chars`
/// (a single oversized line forms its own chunk).
fn chunk_lines(lines: &[String], max_chars: usize) -> Vec<String> {
    let mut chunks = Vec::new();
    let mut current = String::new();
    for line in lines {
        if !current.is_empty() && current.len() + line.len() + 1 > max_chars {
            chunks.push(std::mem::take(&mut current));
        }
        if !current.is_empty() {
            current.push('\n');
        }
        current.push_str(line);
    }
    if !current.is_empty() {
        chunks.push(current);
    }
    chunks
}

/// Survey generation output: every candidate, the retained closed questions
/// and the filter audit trail.
#[derive(Debug, Clone, PartialEq)]
pub struct SurveyOutcome {
    pub candidates: Vec<ClosedQuestion>,
    pub retained: Vec<ClosedQuestion>,
    pub filter_log: Vec<FilterDecision>,
}

/// Organizer turns the open responses into rateable statements, roughly twice
/// the retention cap, which the filters then trim to `max_closed_questions`.
pub async fn generate_survey(
    state: &mut StudyState,
    open_responses: &[OpenResponse],
    backend: &dyn Backend,
    log: &mut Vec<Exchange>,
) -> Result<SurveyOutcome, OrchestratorError> {
    state.expect_phase(Phase::AwaitingSurveyGeneration)?;
    let round = state.round_number();
    let phase = state.phase;
    let config = state.config.clone();
    let question_text = |id: QuestionId| {
        state
            .current_round
            .as_ref()
            .and_then(|r| r.open_questions.iter().find(|q| q.question_id == id))
            .map(|q| q.text.as_str())
            .unwrap_or("")
    };
    let lines: Vec<String> = open_responses
        .iter()
        .map(|r| {
            format!(
                "- Expert {} on \"{}\": {}",
                r.agent_index + 1,
                question_text(r.question_id),
                r.text.replace('\n', " ")
            )
        })
        .collect();
    let chunks = chunk_lines(&lines, config.organizer_chunk_chars);
    let wanted_total = 2 * config.max_closed_questions;
    let per_chunk = wanted_total.div_ceil(chunks.len().max(1)).max(1);
    let system = organizer_system(&config);
    let chunk_count = chunks.len().to_string();
    let round_s = round.to_string();
    let count_s = per_chunk.to_string();
    let requests: Vec<ChatRequest> = chunks
        .iter()
        .enumerate()
        .map(|(i, chunk)| {
            let user = prompts::SURVEY_GENERATION
                .render(&[
                    ("round", &round_s),
                    ("chunk_index", &(i + 1).to_string()),
                    ("chunk_count", &chunk_count),
                    ("responses", chunk),
                    ("count", &count_s),
                ])
                .expect("survey template variables are fixed");
            request(
                &config,
                system.clone(),
                user,
                config.provider.max_organizer_tokens,
                RequestTag::SurveyGeneration {
                    round,
                    requested: per_chunk,
                },
            )
        })
        .collect();
    let lists = organizer_lists(backend, requests, config.parallelism, log, round, phase).await?;
    let candidates: Vec<ClosedQuestion> = lists
        .into_iter()
        .flatten()
        .map(|text| ClosedQuestion {
            question_id: state.allocate_id(),
            text,
            round,
        })
        .collect();
    let pairs: Vec<(QuestionId, String)> = candidates
        .iter()
        .map(|c| (c.question_id, c.text.clone()))
        .collect();
    let filtered = dedup_candidates(
        backend,
        &pairs,
        config.duplicate_threshold,
        config.max_closed_questions,
        round,
        phase,
    )
    .await?;
    let retained: Vec<ClosedQuestion> = candidates
        .iter()
        .filter(|c| filtered.kept.contains(&c.question_id))
        .cloned()
        .collect();
    if retained.is_empty() {
        return Err(OrchestratorError::EmptyQuestionSetAfterFiltering { round, phase });
    }
    Ok(SurveyOutcome {
        candidates,
        retained,
        filter_log: filtered.log,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatingOutcome {
    pub ratings: Vec<Rating>,
    pub abstentions: Vec<Abstention>,
    pub aggregates: Vec<RatingAggregate>,
    pub all_abstained: Vec<QuestionId>,
}

/// One rating per (agent, closed question). Unparseable replies are
/// reprompted once; a second failure is recorded as an abstention and left
/// out of the aggregate.
pub async fn collect_ratings(
    state: &StudyState,
    closed_questions: &[ClosedQuestion],
    backend: &dyn Backend,
    parallelism: usize,
    log: &mut Vec<Exchange>,
) -> Result<RatingOutcome, OrchestratorError> {
    state.expect_phase(Phase::AwaitingRatings)?;
    let round = state.round_number();
    let config = &state.config;
    let scale = config.rating_scale_max;

    let build = |attempt: u32, pairs: &[(usize, usize)]| -> Vec<ChatRequest> {
        pairs
            .iter()
            .map(|&(agent, qi)| {
                let profile = &state.panel[agent];
                let q = &closed_questions[qi];
                let template = if attempt == 0 {
                    prompts::RATING
                } else {
                    prompts::RATING_REPROMPT
                };
                let user = template
                    .render(&[("statement", &q.text)])
                    .expect("rating template variables are fixed");
                request(
                    config,
                    render_responder_prompt(profile, &config.topic),
                    user,
                    RATING_MAX_TOKENS,
                    RequestTag::Rating {
                        agent_index: profile.agent_index,
                        question_id: q.question_id,
                        attempt,
                    },
                )
            })
            .collect()
    };

    let pairs: Vec<(usize, usize)> = (0..state.panel.len())
        .flat_map(|a| (0..closed_questions.len()).map(move |q| (a, q)))
        .collect();
    let replies = batch(backend, build(0, &pairs), parallelism, log, round, state.phase).await?;
    let mut parsed: Vec<Option<u8>> = replies.iter().map(|r| parse_rating(r, scale)).collect();
    let mut last_reply = replies;

    let failed: Vec<usize> = (0..pairs.len()).filter(|&i| parsed[i].is_none()).collect();
    if !failed.is_empty() {
        let retry_pairs: Vec<(usize, usize)> = failed.iter().map(|&i| pairs[i]).collect();
        let retry = batch(
            backend,
            build(1, &retry_pairs),
            parallelism,
            log,
            round,
            state.phase,
        )
        .await?;
        for (&i, reply) in failed.iter().zip(retry) {
            parsed[i] = parse_rating(&reply, scale);
            last_reply[i] = reply;
        }
    }

    let mut ratings = Vec::new();
    let mut abstentions = Vec::new();
    for (i, &(agent, qi)) in pairs.iter().enumerate() {
        let agent_index = state.panel[agent].agent_index;
        let question_id = closed_questions[qi].question_id;
        match parsed[i] {
            Some(value) => ratings.push(Rating {
                agent_index,
                question_id,
                value,
            }),
            None => abstentions.push(Abstention {
                agent_index,
                question_id,
                last_reply: last_reply[i].clone(),
            }),
        }
    }

    let mut aggregates = Vec::new();
    let mut all_abstained = Vec::new();
    for q in closed_questions {
        let values: Vec<u8> = ratings
            .iter()
            .filter(|r| r.question_id == q.question_id)
            .map(|r| r.value)
            .collect();
        match aggregate_ratings(q.question_id, &values) {
            Some(a) => aggregates.push(a),
            None => all_abstained.push(q.question_id),
        }
    }
    Ok(RatingOutcome {
        ratings,
        abstentions,
        aggregates,
        all_abstained,
    })
}

/// The regeneration prompt for a round: each statement with its mean only.
pub fn regeneration_prompt(
    config: &StudyConfig,
    round: u32,
    closed_questions: &[ClosedQuestion],
    aggregates: &[RatingAggregate],
) -> String {
    let mut lines = Vec::new();
    for a in aggregates {
        if let Some(q) = closed_questions.iter().find(|q| q.question_id == a.question_id) {
            lines.push(format!("- {} (mean {})", q.text, format_mean(a.mean)));
        }
    }
    let rated = if lines.is_empty() {
        "(no statement received a valid rating)".to_string()
    } else {
        lines.join("\n")
    };
    prompts::REGENERATION
        .render(&[
            ("round", &round.to_string()),
            ("rated_statements", &rated),
            ("count", &(2 * config.max_open_questions).to_string()),
            ("topic", &config.topic),
        ])
        .expect("regeneration template variables are fixed")
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegenerationOutcome {
    pub candidates: Vec<OpenQuestion>,
    pub retained: Vec<OpenQuestion>,
    pub filter_log: Vec<FilterDecision>,
}

/// Organizer writes new open questions from the closed statements and their
/// means; the filters trim them to `max_open_questions`.
pub async fn regenerate_open_questions(
    state: &mut StudyState,
    closed_questions: &[ClosedQuestion],
    aggregates: &[RatingAggregate],
    backend: &dyn Backend,
    log: &mut Vec<Exchange>,
) -> Result<RegenerationOutcome, OrchestratorError> {
    state.expect_phase(Phase::AwaitingRegeneration)?;
    let round = state.round_number();
    let phase = state.phase;
    let config = state.config.clone();
    let user = regeneration_prompt(&config, round, closed_questions, aggregates);
    let req = request(
        &config,
        organizer_system(&config),
        user,
        config.provider.max_organizer_tokens,
        RequestTag::Regeneration {
            round,
            requested: 2 * config.max_open_questions,
        },
    );
    let lists = organizer_lists(backend, vec![req], 1, log, round, phase).await?;
    let candidates: Vec<OpenQuestion> = lists
        .into_iter()
        .flatten()
        .map(|text| OpenQuestion {
            question_id: state.allocate_id(),
            text,
            round_created: round,
            origin: QuestionOrigin::Generated,
        })
        .collect();
    let pairs: Vec<(QuestionId, String)> = candidates
        .iter()
        .map(|c| (c.question_id, c.text.clone()))
        .collect();
    let filtered = dedup_candidates(
        backend,
        &pairs,
        config.duplicate_threshold,
        config.max_open_questions,
        round,
        phase,
    )
    .await?;
    let retained: Vec<OpenQuestion> = candidates
        .iter()
        .filter(|c| filtered.kept.contains(&c.question_id))
        .cloned()
        .collect();
    if retained.is_empty() {
        return Err(OrchestratorError::EmptyQuestionSetAfterFiltering { round, phase });
    }
    Ok(RegenerationOutcome {
        candidates,
        retained,
        filter_log: filtered.log,
    })
}

pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(CHARS_PER_TOKEN)
}

/// Adds `- item` lines under `heading` while they fit in `budget_chars`,
/// then notes how many were left out.
fn push_section(out: &mut String, heading: &str, items: &[String], budget_chars: usize) {
    out.push_str(heading);
    out.push('\n');
    for (i, item) in items.iter().enumerate() {
        let line = format!("- {item}\n");
        let note = format!("- (+{} more)\n", items.len() - i);
        if out.chars().count() + line.chars().count() + note.chars().count() > budget_chars {
            out.push_str(&note);
            return;
        }
        out.push_str(&line);
    }
}

/// Digest of one round, kept within `budget_tokens`.
pub fn round_digest(round: &RoundRecord, budget_tokens: usize) -> String {
    let budget_chars = budget_tokens * CHARS_PER_TOKEN;
    let mut out = format!("Round {}\n", round.round_number);
    let mut rated: Vec<(f64, String)> = round
        .aggregates
        .iter()
        .filter_map(|a| {
            round
                .closed_questions
                .iter()
                .find(|q| q.question_id == a.question_id)
                .map(|q| (a.mean, q.text.clone()))
        })
        .collect();
    // Most agreed-with first so truncation keeps the extremes at the top.
    rated.sort_by(|a, b| b.0.total_cmp(&a.0));
    let rated: Vec<String> = rated
        .into_iter()
        .map(|(m, t)| format!("{t} (mean {})", format_mean(m)))
        .collect();
    let open: Vec<String> = round.open_questions.iter().map(|q| q.text.clone()).collect();
    let next: Vec<String> = round
        .retained_next_open
        .iter()
        .map(|q| q.text.clone())
        .collect();
    // Share the budget: half for rated statements, a quarter each for the rest.
    let mut used = out.chars().count();
    push_section(&mut out, "Closed statements and mean ratings:", &rated, used + budget_chars / 2);
    used = out.chars().count();
    push_section(&mut out, "Open questions asked:", &open, used + budget_chars / 4);
    push_section(&mut out, "Open questions retained for the next round:", &next, budget_chars);
    out
}

/// Study digest: per-round digests under an equal share of the budget,
/// concatenated.
pub fn study_digest(rounds: &[RoundRecord], budget_tokens: usize) -> String {
    let share = budget_tokens / rounds.len().max(1);
    rounds
        .iter()
        .map(|r| round_digest(r, share))
        .collect::<Vec<_>>()
        .join("\n")
}

pub async fn summarize_study(
    state: &StudyState,
    backend: &dyn Backend,
    log: &mut Vec<Exchange>,
) -> Result<String, OrchestratorError> {
    state.expect_phase(Phase::Summarizing)?;
    let config = &state.config;
    let round = state.completed_rounds.len() as u32;
    let digest = study_digest(&state.completed_rounds, config.context_budget_tokens);
    let user = prompts::SUMMARY
        .render(&[
            ("topic", &config.topic),
            ("num_rounds", &state.completed_rounds.len().to_string()),
            ("digest", &digest),
        ])
        .expect("summary template variables are fixed");
    let req = request(
        config,
        organizer_system(config),
        user,
        config.provider.max_organizer_tokens,
        RequestTag::Summary {
            topic: config.topic.clone(),
        },
    );
    let texts = batch(backend, vec![req], 1, log, round, state.phase).await?;
    Ok(texts.into_iter().next().unwrap_or_default().trim().to_string())
}

/// Advances `state` by exactly one phase.
pub async fn step(
    state: &mut StudyState,
    backend: &dyn Backend,
    log: &mut Vec<Exchange>,
) -> Result<(), OrchestratorError> {
    let parallelism = state.config.parallelism;
    match state.phase {
        Phase::AwaitingOpenAnswers => {
            let responses = elicit_open_answers(state, backend, parallelism, log).await?;
            let questions = std::mem::take(&mut state.pending_open_questions);
            state.current_round = Some(RoundRecord {
                round_number: state.round_number(),
                open_questions: questions,
                open_responses: responses,
                ..RoundRecord::default()
            });
            state.phase = Phase::AwaitingSurveyGeneration;
        }
        Phase::AwaitingSurveyGeneration => {
            let responses = state.current().open_responses.clone();
            let survey = generate_survey(state, &responses, backend, log).await?;
            let current = state.current();
            current.candidate_closed = survey.candidates;
            current.closed_questions = survey.retained;
            current.closed_filter_log = survey.filter_log;
            state.phase = Phase::AwaitingRatings;
        }
        Phase::AwaitingRatings => {
            let closed = state.current().closed_questions.clone();
            let outcome = collect_ratings(state, &closed, backend, parallelism, log).await?;
            let current = state.current();
            current.ratings = outcome.ratings;
            current.abstentions = outcome.abstentions;
            current.aggregates = outcome.aggregates;
            current.all_abstained = outcome.all_abstained;
            state.phase = Phase::AwaitingRegeneration;
        }
        Phase::AwaitingRegeneration => {
            let closed = state.current().closed_questions.clone();
            let aggregates = state.current().aggregates.clone();
            let regen =
                regenerate_open_questions(state, &closed, &aggregates, backend, log).await?;
            let mut round = state
                .current_round
                .take()
                .expect("a round is in progress during regeneration");
            round.candidate_next_open = regen.candidates;
            round.retained_next_open = regen.retained.clone();
            round.open_filter_log = regen.filter_log;
            state.completed_rounds.push(round);
            state.pending_open_questions = regen.retained;
            state.phase = if state.completed_rounds.len() >= state.config.num_rounds {
                Phase::Summarizing
            } else {
                Phase::AwaitingOpenAnswers
            };
        }
        Phase::Summarizing => {
            let summary = summarize_study(state, backend, log).await?;
            state.summary_text = Some(summary);
            state.phase = Phase::Done;
        }
        Phase::Done => return Err(OrchestratorError::AlreadyComplete),
    }
    Ok(())
}

/// Drives a study to completion, optionally persisting it to a run
/// directory.
pub struct Orchestrator<'a> {
    backend: &'a dyn Backend,
    run_dir: Option<PathBuf>,
    prompt_log: Option<JsonlWriter>,
    prompt_log_lines: usize,
    stop_at: Option<(u32, Phase)>,
}

impl<'a> Orchestrator<'a> {
    /// In-memory run: no checkpoints or logs.
    pub fn new(backend: &'a dyn Backend) -> Self {
        Self {
            backend,
            run_dir: None,
            prompt_log: None,
            prompt_log_lines: 0,
            stop_at: None,
        }
    }

    /// Persisting run rooted at `run_dir`. `prompt_log_lines` is the number of
    /// existing log lines to keep (0 for a fresh run).
    pub fn persistent(
        backend: &'a dyn Backend,
        run_dir: impl Into<PathBuf>,
        prompt_log_lines: usize,
    ) -> Result<Self, OrchestratorError> {
        let run_dir = run_dir.into();
        std::fs::create_dir_all(&run_dir).map_err(|source| PersistenceError::Io {
            path: run_dir.clone(),
            source,
        })?;
        let log_path = run_dir.join(PROMPT_LOG_FILE);
        if prompt_log_lines == 0 {
            let _ = std::fs::remove_file(&log_path);
        } else {
            persistence::truncate_lines(&log_path, prompt_log_lines)?;
        }
        Ok(Self {
            backend,
            prompt_log: Some(JsonlWriter::open_append(&log_path)?),
            run_dir: Some(run_dir),
            prompt_log_lines,
            stop_at: None,
        })
    }

    /// Stop with [`OrchestratorError::Halted`] once the state reaches
    /// `phase` of `round`, after its checkpoint is written. Simulates a crash.
    pub fn stop_at(mut self, round: u32, phase: Phase) -> Self {
        self.stop_at = Some((round, phase));
        self
    }

    fn record(&mut self, state: &StudyState, exchanges: &[Exchange], round: u32, phase: Phase) -> Result<(), OrchestratorError> {
        let Some(writer) = &self.prompt_log else {
            return Ok(());
        };
        for ex in exchanges {
            writer.append(&json!({
                "run_index": state.run_index,
                "round": round,
                "phase": phase,
                "tag": ex.tag,
                "system_prompt": ex.system_prompt,
                "user_prompt": ex.user_prompt,
                "response": ex.response,
            }))?;
            self.prompt_log_lines += 1;
        }
        Ok(())
    }

    fn checkpoint(&self, state: &StudyState) -> Result<(), OrchestratorError> {
        if let Some(dir) = &self.run_dir {
            persistence::write_checkpoint(
                &Checkpoint {
                    prompt_log_lines: self.prompt_log_lines,
                    state: state.clone(),
                },
                &dir.join(CHECKPOINT_FILE),
            )?;
        }
        Ok(())
    }

    fn record_failure(&self, err: &OrchestratorError) {
        if let (Some(dir), Some((round, phase))) = (&self.run_dir, err.location()) {
            let record = json!({"round": round, "phase": phase, "error": err.to_string()});
            if let Ok(text) = persistence::to_canonical_json(&record) {
                let _ = persistence::write_atomic(&dir.join("failure.json"), &text);
            }
        }
    }

    /// Runs phases until `Done`, checkpointing after each one, then writes
    /// the transcript.
    pub async fn drive(&mut self, mut state: StudyState) -> Result<StudyResult, OrchestratorError> {
        if state.phase == Phase::Done {
            return Err(OrchestratorError::AlreadyComplete);
        }
        self.checkpoint(&state)?;
        while state.phase != Phase::Done {
            let (round, phase) = (state.round_number(), state.phase);
            let mut exchanges = Vec::new();
            if let Err(e) = step(&mut state, self.backend, &mut exchanges).await {
                self.record_failure(&e);
                return Err(e);
            }
            self.record(&state, &exchanges, round, phase)?;
            self.checkpoint(&state)?;
            tracing::info!(run = state.run_index, round, %phase, "phase complete");
            if self.stop_at == Some((state.round_number(), state.phase)) {
                return Err(OrchestratorError::Halted {
                    round: state.round_number(),
                    phase: state.phase,
                });
            }
        }
        let result = state.into_result();
        if let Some(dir) = &self.run_dir {
            persistence::write_transcript(&result, &dir.join(TRANSCRIPT_FILE))?;
        }
        Ok(result)
    }
}

/// Runs one repeat of a study in memory.
pub async fn run_study(
    config: StudyConfig,
    run_index: usize,
    backend: &dyn Backend,
) -> Result<StudyResult, OrchestratorError> {
    let state = StudyState::new(config, run_index)?;
    Orchestrator::new(backend).drive(state).await
}

/// Runs one repeat of a study, persisting config snapshot, checkpoints,
/// prompt log and transcript under `run_dir`.
pub async fn run_study_in(
    config: StudyConfig,
    run_index: usize,
    backend: &dyn Backend,
    run_dir: &Path,
) -> Result<StudyResult, OrchestratorError> {
    let state = StudyState::new(config, run_index)?;
    let mut orchestrator = Orchestrator::persistent(backend, run_dir, 0)?;
    persistence::write_config(&state.config, &run_dir.join(CONFIG_FILE))?;
    orchestrator.drive(state).await
}

pub fn load_checkpoint(run_dir: &Path) -> Result<Checkpoint, OrchestratorError> {
    let path = run_dir.join(CHECKPOINT_FILE);
    if !path.is_file() {
        return Err(OrchestratorError::NoCheckpoint(path));
    }
    Ok(persistence::read_checkpoint(&path)?)
}

/// Continues a study from its last checkpoint. Refuses completed studies.
pub async fn resume_study(
    run_dir: &Path,
    backend: &dyn Backend,
) -> Result<StudyResult, OrchestratorError> {
    let checkpoint = load_checkpoint(run_dir)?;
    if checkpoint.state.phase == Phase::Done {
        return Err(OrchestratorError::AlreadyComplete);
    }
    let mut orchestrator = Orchestrator::persistent(backend, run_dir, checkpoint.prompt_log_lines)?;
    orchestrator.drive(checkpoint.state).await
}

/// The backend a config asks for, for repeat `run_index`. The mock is seeded
/// with the repeat's derived seed; the HTTP backend reads `DELPHI_API_KEY`
/// and, given a run directory, logs raw exchanges to `providers.jsonl`.
pub fn backend_for(
    config: &StudyConfig,
    run_index: usize,
    run_dir: Option<&Path>,
) -> Result<Arc<dyn Backend>, OrchestratorError> {
    match config.backend_selector {
        BackendSelector::Mock => Ok(Arc::new(
            MockBackend::new(config.run_seed(run_index))
                .with_embedding_dim(config.mock.embedding_dim)
                .with_unparseable_rating_rate(config.mock.unparseable_rating_rate),
        )),
        BackendSelector::Http => {
            let mut backend = HttpBackend::from_env(&config.provider).map_err(|source| {
                OrchestratorError::Backend {
                    round: 0,
                    phase: Phase::AwaitingOpenAnswers,
                    source,
                }
            })?;
            if let Some(dir) = run_dir {
                backend = backend.with_audit_log(Arc::new(JsonlWriter::open_append(
                    dir.join(PROVIDER_LOG_FILE),
                )?));
            }
            Ok(Arc::new(backend))
        }
    }
}
