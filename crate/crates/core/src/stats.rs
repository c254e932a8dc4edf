//! Likert rating statistics.

use crate::model::{QuestionId, RatingAggregate, RATING_SCALE_MAX};
use crate::numeric::Scalar;

/// Mean and population standard deviation of a sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments<S> {
    pub mean: S,
    pub std_dev: S,
    pub count: usize,
}

/// Two-pass mean / population standard deviation. `None` for an empty sample.
pub fn moments<S: Scalar>(values: &[S]) -> Option<Moments<S>> {
    if values.is_empty() {
        return None;
    }
    let n = S::from_usize_lossy(values.len());
    let mean = values.iter().fold(S::zero(), |acc, &x| acc + x) / n;
    let var = values
        .iter()
        .fold(S::zero(), |acc, &x| acc + (x - mean) * (x - mean))
        / n;
    Some(Moments {
        mean,
        std_dev: var.sqrt(),
        count: values.len(),
    })
}

/// Aggregates the integer ratings of one closed question. The mean is the
/// integer sum divided by the count, so it is exact up to one rounding.
pub fn aggregate_ratings(question_id: QuestionId, values: &[u8]) -> Option<RatingAggregate> {
    if values.is_empty() {
        return None;
    }
    let mut histogram = [0usize; RATING_SCALE_MAX as usize];
    for &v in values {
        debug_assert!((1..=RATING_SCALE_MAX).contains(&v));
        histogram[usize::from(v) - 1] += 1;
    }
    let sum: u64 = values.iter().map(|&v| u64::from(v)).sum();
    let count = values.len();
    let mean = sum as f64 / count as f64;
    let as_real: Vec<f64> = values.iter().map(|&v| f64::from(v)).collect();
    let std_dev = moments(&as_real).map(|m| m.std_dev).unwrap_or(0.0);
    Some(RatingAggregate {
        question_id,
        mean,
        std_dev,
        count,
        histogram,
    })
}
