//! Prompt templates with `{{variable}}` substitution.
//!
//! Template text lives in `templates/*.txt` and is compiled in. Every
//! template's SHA-256 is recorded in the transcript so a run can be tied to
//! the exact wording it used.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::LazyLock;

use regex::Regex;
use sha2::{Digest, Sha256};
use thiserror::Error;

static PLACEHOLDER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\{\{\s*([a-z_][a-z0-9_]*)\s*\}\}").expect("valid regex"));

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("template `{template}` requires variable `{variable}`")]
    MissingVariable {
        template: &'static str,
        variable: String,
    },
    #[error("template `{template}` has no variable `{variable}`")]
    UnknownVariable {
        template: &'static str,
        variable: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Template {
    pub name: &'static str,
    pub text: &'static str,
}

impl Template {
    pub const fn new(name: &'static str, text: &'static str) -> Self {
        Self { name, text }
    }

    pub fn variables(&self) -> BTreeSet<&'static str> {
        PLACEHOLDER
            .captures_iter(self.text)
            .filter_map(|c| c.get(1).map(|m| m.as_str()))
            .collect()
    }

    /// Substitutes every placeholder. Both missing and unexpected variables
    /// are errors.
    pub fn render(&self, vars: &[(&str, &str)]) -> Result<String, TemplateError> {
        let declared = self.variables();
        if let Some((name, _)) = vars.iter().find(|(name, _)| !declared.contains(name)) {
            return Err(TemplateError::UnknownVariable {
                template: self.name,
                variable: (*name).to_string(),
            });
        }
        let lookup: BTreeMap<&str, &str> = vars.iter().copied().collect();
        if let Some(missing) = declared.iter().find(|v| !lookup.contains_key(*v)) {
            return Err(TemplateError::MissingVariable {
                template: self.name,
                variable: (*missing).to_string(),
            });
        }
        let rendered = PLACEHOLDER.replace_all(self.text, |caps: &regex::Captures<'_>| {
            lookup[&caps[1]].to_string()
        });
        Ok(rendered.trim_end().to_string())
    }

    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.text.as_bytes()))
    }
}

pub const RESPONDER_SYSTEM: Template = Template::new(
    "responder_system",
    include_str!("../templates/responder_system.txt"),
);
pub const OPEN_ANSWER: Template =
    Template::new("open_answer", include_str!("../templates/open_answer.txt"));
pub const RATING: Template = Template::new("rating", include_str!("../templates/rating.txt"));
pub const RATING_REPROMPT: Template = Template::new(
    "rating_reprompt",
    include_str!("../templates/rating_reprompt.txt"),
);
pub const ORGANIZER_SYSTEM: Template = Template::new(
    "organizer_system",
    include_str!("../templates/organizer_system.txt"),
);
pub const SURVEY_GENERATION: Template = Template::new(
    "survey_generation",
    include_str!("../templates/survey_generation.txt"),
);
pub const REGENERATION: Template =
    Template::new("regeneration", include_str!("../templates/regeneration.txt"));
pub const FORMAT_REMINDER: Template = Template::new(
    "format_reminder",
    include_str!("../templates/format_reminder.txt"),
);
pub const SUMMARY: Template = Template::new("summary", include_str!("../templates/summary.txt"));

pub const ALL_TEMPLATES: [Template; 9] = [
    RESPONDER_SYSTEM,
    OPEN_ANSWER,
    RATING,
    RATING_REPROMPT,
    ORGANIZER_SYSTEM,
    SURVEY_GENERATION,
    REGENERATION,
    FORMAT_REMINDER,
    SUMMARY,
];

pub fn template_hashes() -> BTreeMap<String, String> {
    ALL_TEMPLATES
        .iter()
        .map(|t| (t.name.to_string(), t.sha256()))
        .collect()
}

/// Mean formatting used in regeneration prompts. Two decimals keep a mean of
/// 4.6 recognisable as "4.6" while distinguishing fifteenths.
pub fn format_mean(mean: f64) -> String {
    format!("{mean:.2}")
}

/// Extracts list items from organizer output. Accepts `- `, `* `, `• ` and
/// `1.` / `1)` markers; unmarked lines are ignored.
pub fn parse_list_items(output: &str) -> Vec<String> {
    static ITEM: LazyLock<Regex> = LazyLock::new(|| {
        Regex::new(r"^\s*(?:[-*\u{2022}]|\d{1,3}[.)])\s+(.+?)\s*$").expect("valid regex")
    });
    output
        .lines()
        .filter_map(|line| ITEM.captures(line))
        .map(|c| c[1].trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

/// Reads a 1..=max rating from a short reply. The first integer token must be
/// in range; anything else is a parse failure.
pub fn parse_rating(reply: &str, max: u8) -> Option<u8> {
    static INT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\d+").expect("valid regex"));
    let token = INT.find(reply)?.as_str();
    let value: u8 = token.parse().ok()?;
    (1..=max).contains(&value).then_some(value)
}
