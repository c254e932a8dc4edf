//! Engine for running Delphi studies with language-model agents.
//!
//! A panel of persona-conditioned responders answers open questions; an
//! organizer turns the answers into closed statements, the panel rates them
//! on a 1–5 scale, and the organizer writes the next round's open questions
//! from the mean ratings. Candidate questions are deduplicated by embedding
//! similarity. Studies run for a fixed number of rounds, are checkpointed
//! after every phase, and are fully deterministic on the mock backend.
//!
//! Numeric code that benefits from it (similarity filters, moments) is
//! generic over [`Scalar`]; the aliases below fix the common choices.

pub mod analysis;
pub mod backend;
pub mod dedup;
pub mod model;
pub mod numeric;
pub mod orchestrator;
pub mod persistence;
pub mod persona;
pub mod prompts;
pub mod stats;

pub use numeric::Scalar;

pub type EmbeddedQuestion64 = dedup::EmbeddedQuestion<f64>;
pub type EmbeddedQuestion32 = dedup::EmbeddedQuestion<f32>;
pub type FilterOutcome64 = dedup::FilterOutcome<f64>;
pub type FilterOutcome32 = dedup::FilterOutcome<f32>;
pub type Moments64 = stats::Moments<f64>;
pub type Moments32 = stats::Moments<f32>;
