use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::profile::ProfileSpec;
use crate::error::{Error, Result};

/// Scores how related two texts are, higher meaning closer.
pub trait Similarity {
    fn similarity(&self, a: &str, b: &str) -> f64;
}

/// Cosine between word-count vectors of the two texts.
#[derive(Clone, Copy, Debug, Default)]
pub struct BagOfWords;

impl Similarity for BagOfWords {
    fn similarity(&self, a: &str, b: &str) -> f64 {
        bag_of_words_cosine(a, b)
    }
}

impl<F: Fn(&str, &str) -> f64> Similarity for F {
    fn similarity(&self, a: &str, b: &str) -> f64 {
        self(a, b)
    }
}

/// Lowercased alphanumeric words, with other characters as separators.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn bag_of_words_cosine(a: &str, b: &str) -> f64 {
    let count = |t: &str| {
        let mut m = BTreeMap::<String, f64>::new();
        for w in words(t) {
            *m.entry(w).or_default() += 1.0;
        }
        m
    };
    let (ca, cb) = (count(a), count(b));
    let dot: f64 = ca
        .iter()
        .filter_map(|(w, x)| cb.get(w).map(|y| x * y))
        .sum();
    let norm = |m: &BTreeMap<String, f64>| m.values().map(|x| x * x).sum::<f64>().sqrt();
    let (na, nb) = (norm(&ca), norm(&cb));
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// The profiles picked for one question, best match first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pairing {
    pub question: String,
    /// Indices into the profile pool.
    pub profiles: Vec<usize>,
    pub scores: Vec<f64>,
}

/// Picks `k` profiles per question by similarity between the question and
/// [`ProfileSpec::description`].
///
/// Candidates are visited by descending score, ties by pool index, and a
/// candidate is skipped when it would put more than `⌈k/2⌉` of the picks
/// on one age, gender or race value.
pub fn assign_by_similarity(
    questions: &[String],
    profiles: &[ProfileSpec],
    k: usize,
    sim: &dyn Similarity,
) -> Result<Vec<Pairing>> {
    if k == 0 {
        return Err(Error::Config("assign_by_similarity needs k > 0".into()));
    }
    let cap = k.div_ceil(2);
    let texts: Vec<String> = profiles.iter().map(ProfileSpec::description).collect();
    questions
        .iter()
        .map(|q| {
            let mut ranked: Vec<(usize, f64)> = texts.iter().map(|t| sim.similarity(q, t)).enumerate().collect();
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

            let mut counts = BTreeMap::<(&str, &str), usize>::new();
            let mut blocked = BTreeMap::<(&str, &str), usize>::new();
            let mut pick = Pairing {
                question: q.clone(),
                profiles: Vec::with_capacity(k),
                scores: Vec::with_capacity(k),
            };
            for (i, s) in ranked {
                if pick.profiles.len() == k {
                    break;
                }
                let p = &profiles[i];
                let keys = [
                    ("age", p.age.as_str()),
                    ("gender", p.gender.as_str()),
                    ("race", p.race.as_str()),
                ];
                let full: Vec<_> = keys.iter().filter(|key| counts.get(*key).copied().unwrap_or(0) >= cap).collect();
                if full.is_empty() {
                    for key in keys {
                        *counts.entry(key).or_default() += 1;
                    }
                    pick.profiles.push(i);
                    pick.scores.push(s);
                } else {
                    for key in full {
                        *blocked.entry(*key).or_default() += 1;
                    }
                }
            }
            if pick.profiles.len() < k {
                let binding = blocked
                    .iter()
                    .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                    .map(|((class, value), _)| format!("{class} = {value}"))
                    .unwrap_or_else(|| "pool size".into());
                return Err(Error::Validation(format!(
                    "only {} of {k} profiles satisfy the diversity cap of {cap} for `{q}`; binding class: {binding}",
                    pick.profiles.len()
                )));
            }
            Ok(pick)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::profile::*;
    use proptest::prelude::*;

    #[test]
    fn identical_bags_score_one() {
        assert!((bag_of_words_cosine("old senior man", "man, senior OLD") - 1.0).abs() < 1e-12);
        assert_eq!(bag_of_words_cosine("a b", "c d"), 0.0);
        assert_eq!(bag_of_words_cosine("", "c d"), 0.0);
    }

    #[test]
    fn exact_description_ranks_first() {
        let pool = ProfileSpec::enumerate();
        let target = &pool[300];
        let out = assign_by_similarity(&[target.description()], &pool, 10, &BagOfWords).unwrap();
        assert_eq!(out[0].profiles[0], 300);
        assert!((out[0].scores[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn infeasible_pool_names_the_binding_class() {
        let pool: Vec<_> = Race::ALL
            .iter()
            .map(|&r| ProfileSpec::new(Age::A20_29, Gender::Female, r, Emotion::Happy))
            .collect();
        let err =
            assign_by_similarity(&["a question".to_string()], &pool, 4, &BagOfWords).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("age = 20-29") || msg.contains("gender = female"),
            "{msg}"
        );
    }

    #[test]
    fn custom_similarity_is_used() {
        let pool = ProfileSpec::enumerate();
        let by_index = |_: &str, t: &str| t.len() as f64;
        let a = assign_by_similarity(&["q".to_string()], &pool, 6, &by_index).unwrap();
        let b = assign_by_similarity(&["q".to_string()], &pool, 6, &BagOfWords).unwrap();
        assert_ne!(a, b);
    }

    fn small_pool() -> impl Strategy<Value = Vec<ProfileSpec>> {
        prop::collection::vec((0..9usize, 0..2usize, 0..7usize, 0..7usize), 1..40).prop_map(|v| {
            v.into_iter()
                .map(|(a, g, r, e)| {
                    ProfileSpec::new(Age::ALL[a], Gender::ALL[g], Race::ALL[r], Emotion::ALL[e])
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn diversity_cap_holds_or_errors(pool in small_pool(), k in 1usize..8, q in "[a-z ]{0,30}") {
            let first = assign_by_similarity(&[q.clone()], &pool, k, &BagOfWords);
            let again = assign_by_similarity(&[q.clone()], &pool, k, &BagOfWords);
            prop_assert_eq!(format!("{first:?}"), format!("{again:?}"));
            if let Ok(out) = first {
                let picks = &out[0].profiles;
                prop_assert_eq!(picks.len(), k);
                let cap = k.div_ceil(2);
                for g in Gender::ALL {
                    prop_assert!(picks.iter().filter(|&&i| pool[i].gender == *g).count() <= cap);
                }
                for a in Age::ALL {
                    prop_assert!(picks.iter().filter(|&&i| pool[i].age == *a).count() <= cap);
                }
                for r in Race::ALL {
                    prop_assert!(picks.iter().filter(|&&i| pool[i].race == *r).count() <= cap);
                }
            }
        }
    }
}
