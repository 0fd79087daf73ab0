//! n-gram and subsequence overlap scores.

use std::collections::HashMap;
use std::hash::Hash;

use crate::{Error, Result};

/// Zero n-gram match counts are replaced by this before taking logs.
pub const BLEU_EPSILON: f64 = 1e-9;

fn ngrams<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Sentence BLEU-4: geometric mean of clipped n-gram precisions for
/// n = 1..4 times the brevity penalty against the closest reference length.
pub fn bleu4<T: Eq + Hash>(candidate: &[T], references: &[Vec<T>]) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::arg("bleu4 needs at least one reference"));
    }
    if candidate.is_empty() {
        return Err(Error::arg("bleu4 candidate is empty"));
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cand = ngrams(candidate, n);
        let mut best: HashMap<&[T], usize> = HashMap::new();
        for r in references {
            for (g, c) in ngrams(r, n) {
                let e = best.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let total: usize = cand.values().sum();
        let matched: usize = cand.iter().map(|(g, c)| (*c).min(*best.get(g).unwrap_or(&0))).sum();
        let p = if matched == 0 {
            BLEU_EPSILON / total.max(1) as f64
        } else {
            matched as f64 / total as f64
        };
        log_sum += p.ln();
    }
    let c = candidate.len();
    let r = references
        .iter()
        .map(|r| r.len())
        .min_by_key(|l| (l.abs_diff(c), *l))
        .expect("non-empty");
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * (log_sum / 4.0).exp())
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// ROUGE-L F-measure `(1+β²)PR / (R + β²P)` from the longest common
/// subsequence; 0 when either side is empty.
pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T], beta: f64) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs_len(candidate, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / candidate.len() as f64;
    let r = l / reference.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * p * r / (r + b2 * p)
}
