//! Expert panel sampling and responder system prompts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{CategoricalDistribution, ExpertProfile, PanelDistributions, StudyConfig};
use crate::prompts;

const DEFAULT_CATALOG: &str = include_str!("../data/persona_catalog.json");

/// The persona catalog shipped with the crate.
pub fn default_catalog() -> PanelDistributions {
    serde_json::from_str(DEFAULT_CATALOG).expect("bundled persona catalog is valid JSON")
}

pub fn default_catalog_json() -> &'static str {
    DEFAULT_CATALOG
}

/// Inverse-CDF lookup: the first option whose cumulative probability exceeds
/// `u`. Falls back to the last option when rounding leaves `u` past the end.
pub fn inverse_cdf(distribution: &CategoricalDistribution, u: f64) -> &str {
    let mut cumulative = 0.0;
    for option in &distribution.options {
        cumulative += option.probability;
        if u < cumulative {
            return &option.label;
        }
    }
    &distribution
        .options
        .last()
        .expect("validated distribution is non-empty")
        .label
}

/// Draws one profile. Attributes are sampled independently, in the fixed
/// order of `PersonaAttribute::ALL`, one uniform draw each.
pub fn sample_profile<R: Rng + ?Sized>(
    distributions: &PanelDistributions,
    agent_index: usize,
    rng: &mut R,
) -> ExpertProfile {
    let mut draw = |d: &CategoricalDistribution| inverse_cdf(d, rng.random::<f64>()).to_string();
    ExpertProfile {
        agent_index,
        nationality: draw(&distributions.nationality),
        education: draw(&distributions.education),
        experience_type: draw(&distributions.experience_type),
        experience_field: draw(&distributions.experience_field),
        specialization: draw(&distributions.specialization),
    }
}

/// Samples `num_agents` profiles indexed `0..num_agents`. Duplicate personas
/// are allowed.
pub fn sample_panel<R: Rng + ?Sized>(config: &StudyConfig, rng: &mut R) -> Vec<ExpertProfile> {
    (0..config.num_agents)
        .map(|i| sample_profile(&config.panel_distributions, i, rng))
        .collect()
}

/// The panel for one repeat of a study, from its derived seed.
pub fn panel_for_run(config: &StudyConfig, run_seed: u64) -> Vec<ExpertProfile> {
    let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
    sample_panel(config, &mut rng)
}

pub fn render_responder_prompt(profile: &ExpertProfile, topic: &str) -> String {
    prompts::RESPONDER_SYSTEM
        .render(&[
            ("topic", topic),
            ("nationality", &profile.nationality),
            ("education", &profile.education),
            ("experience_type", &profile.experience_type),
            ("experience_field", &profile.experience_field),
            ("specialization", &profile.specialization),
        ])
        .expect("responder template variables are fixed")
}
