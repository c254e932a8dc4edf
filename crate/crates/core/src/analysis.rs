//! Post-hoc analytics over finished studies: topic occurrence, rating
//! trajectories and repeat-to-repeat divergence.
//!
//! Topic coding is a transparent keyword lexicon. Each topic has a list of
//! case-insensitive regular expressions and is present in a text iff any of
//! them matches. The coding is deliberately simple so it can be audited.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{QuestionId, StudyResult};
use crate::stats::aggregate_ratings;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("invalid pattern {pattern:?} for topic {topic:?}: {source}")]
    BadPattern {
        topic: String,
        pattern: String,
        #[source]
        source: regex::Error,
    },
    #[error("lexicon JSON: {0}")]
    LexiconJson(#[from] serde_json::Error),
    #[error("topic label {0:?} appears twice")]
    DuplicateTopic(String),
    #[error("divergence needs at least two results, got {0}")]
    TooFewResults(usize),
    #[error("results {first} and {second} were produced by different configurations")]
    ConfigMismatch { first: String, second: String },
    #[error("matrix CSV: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicEntry {
    /// Short column label, e.g. `Geo.`.
    pub label: String,
    #[serde(default)]
    pub name: String,
    pub patterns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexiconSpec {
    pub topics: Vec<TopicEntry>,
}

/// A compiled topic lexicon; topic order is preserved for matrix columns.
#[derive(Debug, Clone)]
pub struct TopicLexicon {
    labels: Vec<String>,
    patterns: Vec<Vec<Regex>>,
}

impl TopicLexicon {
    pub fn compile(spec: &LexiconSpec) -> Result<Self, AnalysisError> {
        let mut labels = Vec::with_capacity(spec.topics.len());
        let mut patterns = Vec::with_capacity(spec.topics.len());
        for topic in &spec.topics {
            if labels.contains(&topic.label) {
                return Err(AnalysisError::DuplicateTopic(topic.label.clone()));
            }
            let compiled = topic
                .patterns
                .iter()
                .map(|p| {
                    RegexBuilder::new(p)
                        .case_insensitive(true)
                        .build()
                        .map_err(|source| AnalysisError::BadPattern {
                            topic: topic.label.clone(),
                            pattern: p.clone(),
                            source,
                        })
                })
                .collect::<Result<Vec<_>, _>>()?;
            labels.push(topic.label.clone());
            patterns.push(compiled);
        }
        Ok(Self { labels, patterns })
    }

    pub fn from_json(json: &str) -> Result<Self, AnalysisError> {
        Self::compile(&serde_json::from_str(json)?)
    }

    /// Convenience constructor from `(label, patterns)` pairs.
    pub fn from_pairs<'a>(
        pairs: impl IntoIterator<Item = (&'a str, &'a [&'a str])>,
    ) -> Result<Self, AnalysisError> {
        Self::compile(&LexiconSpec {
            topics: pairs
                .into_iter()
                .map(|(label, pats)| TopicEntry {
                    label: label.to_string(),
                    name: String::new(),
                    patterns: pats.iter().map(|s| s.to_string()).collect(),
                })
                .collect(),
        })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Default lexicon JSON shipped with the crate (15 topics).
pub fn default_lexicon_json() -> &'static str {
    include_str!("../data/topic_lexicon.json")
}

pub fn default_lexicon() -> TopicLexicon {
    TopicLexicon::from_json(default_lexicon_json()).expect("bundled lexicon is valid")
}

/// Labels of every topic with at least one matching pattern.
pub fn detect_topics(text: &str, lexicon: &TopicLexicon) -> BTreeSet<String> {
    lexicon
        .labels
        .iter()
        .zip(&lexicon.patterns)
        .filter(|(_, pats)| pats.iter().any(|re| re.is_match(text)))
        .map(|(label, _)| label.clone())
        .collect()
}

/// Identifier used for a result in matrices and reports.
pub fn run_label(result: &StudyResult) -> String {
    let c = &result.config_snapshot;
    format!(
        "a{}q{}-seed{}-run{}",
        c.num_agents, c.questions_per_agent, c.rng_seed, result.run_index
    )
}

/// Yes/no topic occurrence grid, one row per run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicOccurrenceMatrix {
    pub topics: Vec<String>,
    pub runs: Vec<String>,
    /// `cells[run][topic]`.
    pub cells: Vec<Vec<bool>>,
}

impl TopicOccurrenceMatrix {
    pub fn shape(&self) -> (usize, usize) {
        (self.runs.len(), self.topics.len())
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let header = std::iter::once("run").chain(self.topics.iter().map(String::as_str));
        w.write_record(header).expect("in-memory write");
        for (run, row) in self.runs.iter().zip(&self.cells) {
            let record = std::iter::once(run.as_str())
                .chain(row.iter().map(|&c| if c { "yes" } else { "no" }));
            w.write_record(record).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is UTF-8")
    }

    pub fn from_csv(text: &str) -> Result<Self, AnalysisError> {
        let err = |e: csv::Error| AnalysisError::Csv(e.to_string());
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(text.as_bytes());
        let header = reader.headers().map_err(err)?.clone();
        if header.get(0) != Some("run") {
            return Err(AnalysisError::Csv("first column must be `run`".into()));
        }
        let topics: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut runs = Vec::new();
        let mut cells = Vec::new();
        for record in reader.records() {
            let record = record.map_err(err)?;
            runs.push(record.get(0).unwrap_or_default().to_string());
            let row = record
                .iter()
                .skip(1)
                .map(|c| match c {
                    "yes" => Ok(true),
                    "no" => Ok(false),
                    other => Err(AnalysisError::Csv(format!("cell {other:?} is not yes/no"))),
                })
                .collect::<Result<Vec<_>, _>>()?;
            cells.push(row);
        }
        Ok(Self {
            topics,
            runs,
            cells,
        })
    }

    /// Whitespace-aligned table for terminals.
    pub fn to_text(&self) -> String {
        let run_w = self.runs.iter().map(|r| r.len()).chain([3]).max().unwrap_or(3);
        let widths: Vec<usize> = self.topics.iter().map(|t| t.chars().count().max(3)).collect();
        let mut out = format!("{:<run_w$}", "run");
        for (t, w) in self.topics.iter().zip(&widths) {
            write!(out, "  {t:<w$}").unwrap();
        }
        out = out.trim_end().to_string();
        out.push('\n');
        for (run, row) in self.runs.iter().zip(&self.cells) {
            let mut line = format!("{run:<run_w$}");
            for (&c, w) in row.iter().zip(&widths) {
                write!(line, "  {:<w$}", if c { "yes" } else { "no" }).unwrap();
            }
            out.push_str(line.trim_end());
            out.push('\n');
        }
        out
    }
}

/// Topic occurrence in each result's final summary, rows in input order.
pub fn build_occurrence_matrix(
    results: &[StudyResult],
    lexicon: &TopicLexicon,
) -> TopicOccurrenceMatrix {
    let runs = results.iter().map(run_label).collect();
    let cells = results
        .iter()
        .map(|r| {
            let found = detect_topics(&r.summary_text, lexicon);
            lexicon.labels.iter().map(|l| found.contains(l)).collect()
        })
        .collect();
    TopicOccurrenceMatrix {
        topics: lexicon.labels.clone(),
        runs,
        cells,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub round: u32,
    pub question_id: QuestionId,
    pub text: String,
    /// Round whose open answers produced this statement.
    pub produced_in_round: u32,
    /// `None` when every agent abstained.
    pub mean: Option<f64>,
    pub count: usize,
}

/// Every closed question of every round with its mean rating, in round and
/// survey order.
pub fn rating_trajectories(result: &StudyResult) -> Vec<TrajectoryPoint> {
    let mut out = Vec::new();
    for round in &result.rounds {
        for q in &round.closed_questions {
            let agg = round.aggregates.iter().find(|a| a.question_id == q.question_id);
            out.push(TrajectoryPoint {
                round: round.round_number,
                question_id: q.question_id,
                text: q.text.clone(),
                produced_in_round: q.round,
                mean: agg.map(|a| a.mean),
                count: agg.map_or(0, |a| a.count),
            });
        }
    }
    out
}

/// Stored aggregates that disagree with a recomputation from the raw
/// ratings by more than `tolerance` (empty when consistent).
pub fn aggregate_discrepancies(result: &StudyResult, tolerance: f64) -> Vec<String> {
    let mut problems = Vec::new();
    for round in &result.rounds {
        for stored in &round.aggregates {
            let values: Vec<u8> = round
                .ratings
                .iter()
                .filter(|r| r.question_id == stored.question_id)
                .map(|r| r.value)
                .collect();
            match aggregate_ratings(stored.question_id, &values) {
                Some(fresh)
                    if (fresh.mean - stored.mean).abs() <= tolerance
                        && (fresh.std_dev - stored.std_dev).abs() <= tolerance
                        && fresh.count == stored.count
                        && fresh.histogram == stored.histogram => {}
                other => problems.push(format!(
                    "round {} {}: stored {:?}, recomputed {:?}",
                    round.round_number, stored.question_id, stored, other
                )),
            }
        }
    }
    problems
}

pub fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

fn final_round_means(result: &StudyResult) -> BTreeMap<String, f64> {
    let Some(last) = result.rounds.last() else {
        return BTreeMap::new();
    };
    last.aggregates
        .iter()
        .filter_map(|a| {
            last.closed_questions
                .iter()
                .find(|q| q.question_id == a.question_id)
                .map(|q| (q.text.clone(), a.mean))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDivergence {
    pub first: String,
    pub second: String,
    pub topic_jaccard: f64,
    pub shared_final_questions: usize,
    /// Mean |Δmean| over final-round statements with identical text.
    pub mean_abs_rating_diff: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub runs: Vec<String>,
    pub topics: BTreeMap<String, BTreeSet<String>>,
    pub pairs: Vec<PairDivergence>,
}

/// Pairwise topic-set Jaccard and final-round mean differences across
/// repeats of one configuration. Descriptive only.
pub fn cross_run_divergence(
    results: &[StudyResult],
    lexicon: &TopicLexicon,
) -> Result<DivergenceReport, AnalysisError> {
    if results.len() < 2 {
        return Err(AnalysisError::TooFewResults(results.len()));
    }
    let labels: Vec<String> = results.iter().map(run_label).collect();
    for (i, r) in results.iter().enumerate().skip(1) {
        if r.config_snapshot != results[0].config_snapshot {
            return Err(AnalysisError::ConfigMismatch {
                first: labels[0].clone(),
                second: labels[i].clone(),
            });
        }
    }
    let topic_sets: Vec<BTreeSet<String>> = results
        .iter()
        .map(|r| detect_topics(&r.summary_text, lexicon))
        .collect();
    let means: Vec<BTreeMap<String, f64>> = results.iter().map(final_round_means).collect();
    let mut pairs = Vec::new();
    for i in 0..results.len() {
        for j in i + 1..results.len() {
            let diffs: Vec<f64> = means[i]
                .iter()
                .filter_map(|(text, m)| means[j].get(text).map(|n| (m - n).abs()))
                .collect();
            pairs.push(PairDivergence {
                first: labels[i].clone(),
                second: labels[j].clone(),
                topic_jaccard: jaccard(&topic_sets[i], &topic_sets[j]),
                shared_final_questions: diffs.len(),
                mean_abs_rating_diff: (!diffs.is_empty())
                    .then(|| diffs.iter().sum::<f64>() / diffs.len() as f64),
            });
        }
    }
    Ok(DivergenceReport {
        topics: labels.iter().cloned().zip(topic_sets).collect(),
        runs: labels,
        pairs,
    })
}

/// Static SVG: one dot per closed question at (round, mean) and a line
/// through the per-round average.
pub fn trajectories_svg(result: &StudyResult) -> String {
    const W: f64 = 640.0;
    const H: f64 = 360.0;
    const PAD: f64 = 48.0;
    let points = rating_trajectories(result);
    let rounds = result.rounds.len().max(1) as f64;
    let scale = f64::from(result.config_snapshot.rating_scale_max.max(2));
    let x = |round: u32| {
        if rounds <= 1.0 {
            W / 2.0
        } else {
            PAD + (f64::from(round) - 1.0) / (rounds - 1.0) * (W - 2.0 * PAD)
        }
    };
    let y = |mean: f64| H - PAD - (mean - 1.0) / (scale - 1.0) * (H - 2.0 * PAD);

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    );
    writeln!(svg, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>").unwrap();
    writeln!(
        svg,
        "<line x1=\"{PAD}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n<line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{b}\" stroke=\"black\"/>",
        b = H - PAD,
        r = W - PAD
    )
    .unwrap();
    for v in 1..=result.config_snapshot.rating_scale_max {
        let yy = y(f64::from(v));
        writeln!(
            svg,
            "<text x=\"{}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"end\">{v}</text>",
            PAD - 6.0,
            yy + 4.0
        )
        .unwrap();
    }
    for r in &result.rounds {
        writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">R{}</text>",
            x(r.round_number),
            H - PAD + 16.0,
            r.round_number
        )
        .unwrap();
    }
    for p in &points {
        if let Some(m) = p.mean {
            writeln!(
                svg,
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"steelblue\" fill-opacity=\"0.5\"><title>{}: {:.2}</title></circle>",
                x(p.round),
                y(m),
                xml_escape(&p.text),
                m
            )
            .unwrap();
        }
    }
    let averages: Vec<String> = result
        .rounds
        .iter()
        .filter_map(|r| {
            let ms: Vec<f64> = r.aggregates.iter().map(|a| a.mean).collect();
            (!ms.is_empty()).then(|| {
                let avg = ms.iter().sum::<f64>() / ms.len() as f64;
                format!("{:.1},{:.1}", x(r.round_number), y(avg))
            })
        })
        .collect();
    if !averages.is_empty() {
        writeln!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"firebrick\" stroke-width=\"2\"/>",
            averages.join(" ")
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}
