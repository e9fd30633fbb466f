//! Hand-crafted query/passage features for the relevance scorer.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::corpus::Passage;
use crate::index::tokenize;

/// Feature schema version recorded in checkpoints. Bump when the feature
/// set or ordering changes.
pub const FEATURE_SCHEMA_VERSION: u32 = 1;
pub const FEATURE_DIM: usize = 8;

/// A fixed-length feature vector. Order:
///
/// 1. BM25 first-stage score
/// 2. fraction of query terms present in the passage text
/// 3. fraction of passage terms present in the query
/// 4. log(1 + passage word count)
/// 5. fraction of query terms present in the title
/// 6. number of exact query-bigram matches in the passage text
/// 7. 1 / (1 + word position of the earliest query term), 0 if no match
/// 8. constant 1.0
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

pub fn extract_features(query: &str, passage: &Passage, first_stage_score: f64) -> FeatureVector {
    let q_tokens = tokenize(query);
    let p_tokens = tokenize(&passage.text);
    let t_tokens = tokenize(&passage.title);

    let q_set: HashSet<&str> = q_tokens.iter().map(String::as_str).collect();
    let p_set: HashSet<&str> = p_tokens.iter().map(String::as_str).collect();
    let t_set: HashSet<&str> = t_tokens.iter().map(String::as_str).collect();

    let frac = |hits: usize, total: usize| {
        if total == 0 {
            0.0
        } else {
            hits as f64 / total as f64
        }
    };

    let q_in_p = q_set.iter().filter(|t| p_set.contains(**t)).count();
    let p_in_q = p_set.iter().filter(|t| q_set.contains(**t)).count();
    let q_in_title = q_set.iter().filter(|t| t_set.contains(**t)).count();

    let q_bigrams: HashSet<(&str, &str)> = q_tokens
        .windows(2)
        .map(|w| (w[0].as_str(), w[1].as_str()))
        .collect();
    let bigram_matches = p_tokens
        .windows(2)
        .filter(|w| q_bigrams.contains(&(w[0].as_str(), w[1].as_str())))
        .count();

    let first_hit = p_tokens
        .iter()
        .position(|t| q_set.contains(t.as_str()))
        .map(|pos| 1.0 / (1.0 + pos as f64))
        .unwrap_or(0.0);

    FeatureVector(vec![
        first_stage_score,
        frac(q_in_p, q_set.len()),
        frac(p_in_q, p_set.len()),
        (1.0 + passage.word_count as f64).ln(),
        frac(q_in_title, q_set.len()),
        bigram_matches as f64,
        first_hit,
        1.0,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn passage(title: &str, text: &str) -> Passage {
        Passage {
            passage_id: "p#0".to_string(),
            title: title.to_string(),
            text: text.to_string(),
            word_count: text.split_whitespace().count(),
        }
    }

    #[test]
    fn full_overlap_and_bigram_match() {
        let fv = extract_features("apple pie", &passage("Cooking", "apple pie recipe"), 1.0);
        assert_eq!(fv.0[1], 1.0);
        assert_eq!(fv.0[5], 1.0);
    }

    #[test]
    fn disjoint_terms_zero_out_overlap_features() {
        let fv = extract_features("apple pie", &passage("Trains", "diesel locomotive"), 0.5);
        assert_eq!(fv.0[1], 0.0);
        assert_eq!(fv.0[2], 0.0);
        assert_eq!(fv.0[4], 0.0);
        assert_eq!(fv.0[5], 0.0);
        assert_eq!(fv.0[6], 0.0);
    }

    /// Naive string-counting oracle, written directly from the feature
    /// definitions without sharing code with `extract_features`.
    fn feature_oracle(query: &str, p: &Passage, bm25: f64) -> Vec<f64> {
        let words = |s: &str| -> Vec<String> {
            s.to_lowercase()
                .split(|c: char| !c.is_alphanumeric())
                .filter(|w| !w.is_empty())
                .map(str::to_string)
                .collect()
        };
        let q = words(query);
        let pt = words(&p.text);
        let tt = words(&p.title);
        let uniq = |v: &[String]| -> Vec<String> {
            let mut seen = Vec::new();
            for w in v {
                if !seen.contains(w) {
                    seen.push(w.clone());
                }
            }
            seen
        };
        let qu = uniq(&q);
        let pu = uniq(&pt);
        let f2 = if qu.is_empty() {
            0.0
        } else {
            qu.iter().filter(|w| pt.contains(w)).count() as f64 / qu.len() as f64
        };
        let f3 = if pu.is_empty() {
            0.0
        } else {
            pu.iter().filter(|w| q.contains(w)).count() as f64 / pu.len() as f64
        };
        let f5 = if qu.is_empty() {
            0.0
        } else {
            qu.iter().filter(|w| tt.contains(w)).count() as f64 / qu.len() as f64
        };
        let mut f6 = 0.0;
        for i in 0..pt.len().saturating_sub(1) {
            for j in 0..q.len().saturating_sub(1) {
                if pt[i] == q[j] && pt[i + 1] == q[j + 1] {
                    f6 += 1.0;
                    break;
                }
            }
        }
        let mut f7 = 0.0;
        for (i, w) in pt.iter().enumerate() {
            if q.contains(w) {
                f7 = 1.0 / (1.0 + i as f64);
                break;
            }
        }
        vec![
            bm25,
            f2,
            f3,
            (1.0 + p.word_count as f64).ln(),
            f5,
            f6,
            f7,
            1.0,
        ]
    }

    proptest! {
        #[test]
        fn matches_naive_counting_oracle(
            query in "[a-d ]{1,12}",
            title in "[a-d ]{0,8}",
            text in "[a-d ]{0,30}",
            bm25 in 0.0f64..10.0,
        ) {
            let p = passage(&title, &text);
            let got = extract_features(&query, &p, bm25);
            let want = feature_oracle(&query, &p, bm25);
            prop_assert_eq!(got.0.len(), FEATURE_DIM);
            for (g, w) in got.0.iter().zip(&want) {
                prop_assert!((g - w).abs() < 1e-12, "got {:?} want {:?}", got.0, want);
                prop_assert!(g.is_finite());
            }
        }
    }
}
