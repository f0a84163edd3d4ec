use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Precision, recall and F1 of a candidate against a reference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    /// Builds the score from a match count and the two lengths. An empty
    /// side contributes 0 rather than 0/0.
    pub fn from_counts(matches: usize, candidate_len: usize, reference_len: usize) -> Self {
        let ratio = |n: usize| {
            if n == 0 {
                0.0
            } else {
                matches as f64 / n as f64
            }
        };
        let (p, r) = (ratio(candidate_len), ratio(reference_len));
        Self {
            precision: p,
            recall: r,
            f1: f1(p, r),
        }
    }
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Lowercases, drops punctuation and splits on whitespace.
/// `"Don't panic!"` becomes `["dont", "panic"]`.
pub fn tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| !c.is_ascii_punctuation())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Size of the multiset intersection of two token lists.
pub fn clipped_matches(candidate: &[String], reference: &[String]) -> usize {
    let mut counts = BTreeMap::<&str, usize>::new();
    for t in reference {
        *counts.entry(t).or_default() += 1;
    }
    candidate
        .iter()
        .filter(|t| match counts.get_mut(t.as_str()) {
            Some(n) if *n > 0 => {
                *n -= 1;
                true
            }
            _ => false,
        })
        .count()
}

/// Length of the longest common subsequence, by dynamic programming over
/// two rolling rows.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = prev.clone();
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Unigram overlap with clipped counts.
pub fn rouge1(candidate: &str, reference: &str) -> RougeScore {
    let (c, r) = (tokens(candidate), tokens(reference));
    RougeScore::from_counts(clipped_matches(&c, &r), c.len(), r.len())
}

/// Longest-common-subsequence overlap.
pub fn rouge_l(candidate: &str, reference: &str) -> RougeScore {
    let (c, r) = (tokens(candidate), tokens(reference));
    RougeScore::from_counts(lcs_len(&c, &r), c.len(), r.len())
}
