//! Independent reference implementations and fixtures shared by the
//! integration tests (and by the CLI acceptance suite).
#![allow(dead_code)]

use delphi_core::dedup::EmbeddedQuestion;
use delphi_core::model::{default_initial_questions, QuestionId, StudyConfig};
use delphi_core::persona::default_catalog;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn grid_config(agents: usize, questions: usize, seed: u64) -> StudyConfig {
    StudyConfig::for_grid(
        "future of GenAI",
        default_initial_questions(),
        agents,
        questions,
        default_catalog(),
        seed,
    )
}

// ---------------------------------------------------------------- dedup ----

fn ref_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y);
    let na = a.iter().fold(0.0, |acc, x| acc + x * x).sqrt();
    let nb = b.iter().fold(0.0, |acc, x| acc + x * x).sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Keep-first reference: walk the list, keep a question only if none of the
/// previously kept ones is strictly more similar than `threshold`.
pub fn brute_threshold(items: &[(u64, Vec<f64>)], threshold: f64) -> Vec<u64> {
    fn go(items: &[(u64, Vec<f64>)], threshold: f64, kept: Vec<usize>, i: usize) -> Vec<usize> {
        if i == items.len() {
            return kept;
        }
        let dup = kept
            .iter()
            .any(|&k| ref_cosine(&items[i].1, &items[k].1) > threshold);
        let mut next = kept;
        if !dup {
            next.push(i);
        }
        go(items, threshold, next, i + 1)
    }
    go(items, threshold, Vec::new(), 0)
        .into_iter()
        .map(|i| items[i].0)
        .collect()
}

/// Iterative reference: rebuild the whole similarity matrix of the survivors
/// every iteration and drop the one with the largest mean off-diagonal
/// similarity (larger id on exact ties).
pub fn brute_prune(items: &[(u64, Vec<f64>)], target: usize) -> Vec<u64> {
    let mut alive: Vec<&(u64, Vec<f64>)> = items.iter().collect();
    while alive.len() > target {
        let m = alive.len();
        let matrix: Vec<Vec<f64>> = (0..m)
            .map(|i| {
                (0..m)
                    .map(|j| if i == j { 0.0 } else { ref_cosine(&alive[i].1, &alive[j].1) })
                    .collect()
            })
            .collect();
        let means: Vec<f64> = matrix
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let s = row
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .fold(0.0, |acc, (_, v)| acc + v);
                s / (m - 1) as f64
            })
            .collect();
        let mut worst = 0;
        for i in 1..m {
            if means[i] > means[worst] || (means[i] == means[worst] && alive[i].0 > alive[worst].0)
            {
                worst = i;
            }
        }
        alive.remove(worst);
    }
    alive.into_iter().map(|(id, _)| *id).collect()
}

pub struct DedupInstance {
    pub items: Vec<(u64, Vec<f64>)>,
    pub threshold: f64,
    pub target: usize,
}

impl DedupInstance {
    pub fn embedded(&self) -> Vec<EmbeddedQuestion<f64>> {
        self.items
            .iter()
            .map(|(id, v)| EmbeddedQuestion::new(QuestionId(*id), v.clone()))
            .collect()
    }
}

/// Clustered random vectors so that the threshold filter has real work to
/// do: a few centres, tight or loose noise, some exact copies.
pub fn dedup_instance(seed: u64) -> DedupInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=20);
    let d = [4usize, 16, 64][rng.random_range(0..3)];
    let centres: Vec<Vec<f64>> = (0..rng.random_range(1..=5))
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let spread = [0.02, 0.1, 0.4, 1.5][rng.random_range(0..4)];
    let mut items: Vec<(u64, Vec<f64>)> = Vec::with_capacity(n);
    for i in 0..n {
        let v: Vec<f64> = if i > 0 && rng.random_bool(0.1) {
            items[rng.random_range(0..i)].1.clone()
        } else {
            let c = &centres[rng.random_range(0..centres.len())];
            c.iter()
                .map(|x| x + spread * rng.random_range(-1.0..1.0))
                .collect()
        };
        let v = if v.iter().all(|x| *x == 0.0) {
            let mut v = v;
            v[0] = 1.0;
            v
        } else {
            v
        };
        items.push((100 + i as u64 * 3, v));
    }
    DedupInstance {
        items,
        threshold: rng.random_range(0.5..0.99),
        target: rng.random_range(1..=n),
    }
}

// ---------------------------------------------------------------- stats ----

/// Population mean and standard deviation computed independently of the
/// crate: mean from the histogram, variance from `E[x²] - mean²` in exact
/// integer arithmetic.
pub fn ref_mean_std(values: &[u8]) -> (f64, f64) {
    let n = values.len() as i64;
    let s: i64 = values.iter().map(|&v| v as i64).sum();
    let ss: i64 = values.iter().map(|&v| (v as i64) * (v as i64)).sum();
    let mean = s as f64 / n as f64;
    // n² · var = n·Σx² − (Σx)², exact in integers.
    let scaled = n * ss - s * s;
    let std = (scaled as f64).sqrt() / n as f64;
    (mean, std)
}
