//! Question pruning by embedding similarity.
//!
//! Two filters run in sequence on each batch of generated questions:
//! [`filter_threshold`] drops near-duplicates, then [`prune_to_count`]
//! repeatedly drops the question most similar on average to the rest until a
//! target count remains. Both preserve input order.

use thiserror::Error;

use crate::model::QuestionId;
use crate::numeric::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DedupError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("zero-norm vector")]
    ZeroVector,
    #[error("empty vector")]
    EmptyVector,
    #[error("non-finite vector component")]
    NonFinite,
    #[error("prune target must be at least 1")]
    ZeroTarget,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedQuestion<S = f64> {
    pub question_id: QuestionId,
    pub vector: Vec<S>,
}

impl<S: Scalar> EmbeddedQuestion<S> {
    pub fn new(question_id: QuestionId, vector: Vec<S>) -> Self {
        Self {
            question_id,
            vector,
        }
    }
}

/// Why a question was dropped.
#[derive(Debug, Clone, PartialEq)]
pub enum Removal<S> {
    /// Similarity to an earlier retained question exceeded the threshold.
    Duplicate {
        question_id: QuestionId,
        kept: QuestionId,
        similarity: S,
    },
    /// Highest mean similarity to the remaining set at removal time.
    MostRedundant {
        question_id: QuestionId,
        mean_similarity: S,
    },
}

impl<S: Copy> Removal<S> {
    pub fn question_id(&self) -> QuestionId {
        match self {
            Removal::Duplicate { question_id, .. } | Removal::MostRedundant { question_id, .. } => {
                *question_id
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome<S> {
    pub kept: Vec<EmbeddedQuestion<S>>,
    pub removed: Vec<Removal<S>>,
}

impl<S: Scalar> FilterOutcome<S> {
    pub fn kept_ids(&self) -> Vec<QuestionId> {
        self.kept.iter().map(|q| q.question_id).collect()
    }
}

fn norm<S: Scalar>(v: &[S]) -> S {
    v.iter().fold(S::zero(), |acc, &x| acc + x * x).sqrt()
}

/// `dot(a, b) / (|a| |b|)`, clamped to `[-1, 1]`.
pub fn cosine_similarity<S: Scalar>(a: &[S], b: &[S]) -> Result<S, DedupError> {
    if a.len() != b.len() {
        return Err(DedupError::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Err(DedupError::EmptyVector);
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(DedupError::NonFinite);
    }
    let (na, nb) = (norm(a), norm(b));
    if na == S::zero() || nb == S::zero() {
        return Err(DedupError::ZeroVector);
    }
    let dot = a.iter().zip(b).fold(S::zero(), |acc, (&x, &y)| acc + x * y);
    Ok((dot / (na * nb)).max(-S::one()).min(S::one()))
}

fn check_uniform<S: Scalar>(questions: &[EmbeddedQuestion<S>]) -> Result<(), DedupError> {
    if let Some(first) = questions.first() {
        let d = first.vector.len();
        if d == 0 {
            return Err(DedupError::EmptyVector);
        }
        if let Some(q) = questions.iter().find(|q| q.vector.len() != d) {
            return Err(DedupError::DimensionMismatch {
                left: d,
                right: q.vector.len(),
            });
        }
    }
    Ok(())
}

/// Pairwise similarity matrix; the diagonal is left at zero and never read.
fn similarity_matrix<S: Scalar>(questions: &[EmbeddedQuestion<S>]) -> Result<Vec<Vec<S>>, DedupError> {
    let n = questions.len();
    let mut m = vec![vec![S::zero(); n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let s = cosine_similarity(&questions[i].vector, &questions[j].vector)?;
            m[i][j] = s;
            m[j][i] = s;
        }
    }
    Ok(m)
}

/// Greedy keep-first scan: a question survives iff its similarity to every
/// already-kept question is `<= threshold`. Removal is strict (`> threshold`).
pub fn filter_threshold<S: Scalar>(
    questions: &[EmbeddedQuestion<S>],
    threshold: S,
) -> Result<FilterOutcome<S>, DedupError> {
    check_uniform(questions)?;
    let mut kept: Vec<EmbeddedQuestion<S>> = Vec::with_capacity(questions.len());
    let mut removed = Vec::new();
    'candidates: for q in questions {
        for k in &kept {
            let s = cosine_similarity(&q.vector, &k.vector)?;
            if s > threshold {
                removed.push(Removal::Duplicate {
                    question_id: q.question_id,
                    kept: k.question_id,
                    similarity: s,
                });
                continue 'candidates;
            }
        }
        // Bad vectors must surface even when nothing has been kept yet.
        if q.vector.iter().any(|x| !x.is_finite()) {
            return Err(DedupError::NonFinite);
        }
        if norm(&q.vector) == S::zero() {
            return Err(DedupError::ZeroVector);
        }
        kept.push(q.clone());
    }
    Ok(FilterOutcome { kept, removed })
}

/// Removes, one at a time, the question with the highest mean similarity to
/// the other remaining questions until `target` remain. Means exclude
/// self-similarity and are recomputed after each removal. Exact ties remove
/// the larger (newer) question id.
pub fn prune_to_count<S: Scalar>(
    questions: &[EmbeddedQuestion<S>],
    target: usize,
) -> Result<FilterOutcome<S>, DedupError> {
    if target == 0 {
        return Err(DedupError::ZeroTarget);
    }
    check_uniform(questions)?;
    for q in questions {
        if q.vector.iter().any(|x| !x.is_finite()) {
            return Err(DedupError::NonFinite);
        }
        if norm(&q.vector) == S::zero() {
            return Err(DedupError::ZeroVector);
        }
    }
    if questions.len() <= target {
        return Ok(FilterOutcome {
            kept: questions.to_vec(),
            removed: Vec::new(),
        });
    }

    let sims = similarity_matrix(questions)?;
    let mut alive = vec![true; questions.len()];
    let mut remaining = questions.len();
    let mut removed = Vec::new();

    while remaining > target {
        let others = S::from_usize_lossy(remaining - 1);
        let mut worst: Option<(usize, S)> = None;
        for i in (0..questions.len()).filter(|&i| alive[i]) {
            let sum = (0..questions.len())
                .filter(|&j| j != i && alive[j])
                .fold(S::zero(), |acc, j| acc + sims[i][j]);
            let mean = sum / others;
            let replace = match worst {
                None => true,
                Some((w, best)) => {
                    mean > best
                        || (mean == best && questions[i].question_id > questions[w].question_id)
                }
            };
            if replace {
                worst = Some((i, mean));
            }
        }
        let (idx, mean) = worst.expect("remaining > target >= 1");
        alive[idx] = false;
        remaining -= 1;
        removed.push(Removal::MostRedundant {
            question_id: questions[idx].question_id,
            mean_similarity: mean,
        });
    }

    let kept = questions
        .iter()
        .zip(&alive)
        .filter(|(_, &a)| a)
        .map(|(q, _)| q.clone())
        .collect();
    Ok(FilterOutcome { kept, removed })
}
