//! Black-box agent abstraction: utility functions and deterministic oracle
//! agents that emit per-document binary feedback.
//!
//! Oracles stand in for real retrieval-augmented language models. Each kind
//! has a different acceptance predicate so that agents genuinely disagree
//! about which documents are useful:
//!
//! * `containment`: a gold answer appears in the passage text.
//! * `title_sensitive`: containment, and at least one query term appears in
//!   the passage title (agents that need entity-grounded evidence).
//! * `position_sensitive`: containment, with the answer in the first half
//!   of the passage (short-context agents).
//!
//! All operations are pure given the descriptor and safe to call
//! concurrently. Feedback noise is opt-in and defaults to zero.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Passage;
use crate::index::tokenize;
use crate::reranker::AgentIds;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}:{line}: invalid query record: {source}")]
    BadQueryRecord {
        path: String,
        line: usize,
        source: serde_json::Error,
    },
    #[error("invalid roster file: {0}")]
    BadRoster(serde_json::Error),
    #[error("duplicate agent id in roster: {0}")]
    DuplicateAgent(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UtilityKind {
    ExactMatch,
    Accuracy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    Containment,
    TitleSensitive,
    PositionSensitive,
}

/// How an oracle agent decides per-document usefulness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleAgentSpec {
    pub kind: OracleKind,
    /// Probability of flipping a label; must stay below 0.5 so feedback
    /// remains informative.
    #[serde(default)]
    pub noise_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

/// An agent as seen by the engine: identity, serving depth, and utility.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentDescriptor {
    pub agent_id: String,
    pub tid: String,
    pub mid: String,
    pub k: usize,
    pub utility_kind: UtilityKind,
    pub oracle: OracleAgentSpec,
}

impl AgentDescriptor {
    pub fn ids(&self) -> AgentIds {
        AgentIds::new(self.tid.clone(), self.mid.clone())
    }

    /// The same descriptor with feedback noise disabled; used for utility
    /// measurement.
    pub fn noise_free(&self) -> AgentDescriptor {
        let mut out = self.clone();
        out.oracle.noise_rate = 0.0;
        out
    }
}

/// One task instance: input text and the set of acceptable gold answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryInstance {
    pub query_id: String,
    pub input: String,
    pub answers: Vec<String>,
}

/// One unit of agent feedback on one served document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub query_id: String,
    pub agent_id: String,
    pub passage_id: String,
    pub label: u8,
}

/// SQuAD-style answer normalization: lowercase, strip ASCII punctuation,
/// drop the articles a/an/the, collapse whitespace. Idempotent.
pub fn normalize_answer(s: &str) -> String {
    let lowered = s.to_lowercase();
    let no_punct: String = lowered
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// 1 iff the normalized prediction equals some normalized gold answer.
pub fn utility_exact_match(prediction: &str, answers: &[String]) -> u8 {
    let p = normalize_answer(prediction);
    answers.iter().any(|a| normalize_answer(a) == p) as u8
}

/// 1 iff the prediction equals some gold answer after trimming and
/// case-folding.
pub fn utility_accuracy(prediction: &str, answers: &[String]) -> u8 {
    let p = prediction.trim().to_lowercase();
    answers.iter().any(|a| a.trim().to_lowercase() == p) as u8
}

/// Binary usefulness feedback for one (agent, query, passage) triple.
/// Deterministic given the oracle seed, query id, and passage id.
pub fn agent_feedback(agent: &AgentDescriptor, query: &QueryInstance, passage: &Passage) -> u8 {
    let text = normalize_answer(&passage.text);
    let answers: Vec<String> = query
        .answers
        .iter()
        .map(|a| normalize_answer(a))
        .filter(|a| !a.is_empty())
        .collect();

    let hit = answers.iter().filter_map(|a| text.find(a.as_str())).min();
    let contained = hit.is_some();

    let mut label = match agent.oracle.kind {
        OracleKind::Containment => contained,
        OracleKind::TitleSensitive => {
            let title_tokens = tokenize(&passage.title);
            let query_terms = tokenize(&query.input);
            contained && query_terms.iter().any(|t| title_tokens.contains(t))
        }
        OracleKind::PositionSensitive => match hit {
            // answer must start in the first half of the normalized text
            Some(pos) => pos * 2 < text.len(),
            None => false,
        },
    } as u8;

    if agent.oracle.noise_rate > 0.0 {
        let draw = unit_draw(agent.oracle.seed, &query.query_id, &passage.passage_id);
        if draw < agent.oracle.noise_rate {
            label ^= 1;
        }
    }
    label
}

/// Stable per-(seed, query, passage) uniform draw in [0, 1). FNV-1a over the
/// key mixed through splitmix64, so results do not depend on the process or
/// toolchain.
fn unit_draw(seed: u64, query_id: &str, passage_id: &str) -> f64 {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    eat(&seed.to_le_bytes());
    eat(query_id.as_bytes());
    eat(&[0xff]);
    eat(passage_id.as_bytes());

    // splitmix64 finalizer
    let mut z = h.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

/// Loads an agent roster from a JSON array of descriptors.
pub fn load_roster(path: impl AsRef<Path>) -> Result<Vec<AgentDescriptor>, AgentError> {
    let file = File::open(path)?;
    let roster: Vec<AgentDescriptor> =
        serde_json::from_reader(BufReader::new(file)).map_err(AgentError::BadRoster)?;
    let mut seen = std::collections::HashSet::new();
    for agent in &roster {
        if !seen.insert(agent.agent_id.clone()) {
            return Err(AgentError::DuplicateAgent(agent.agent_id.clone()));
        }
    }
    Ok(roster)
}

/// Loads a query set from newline-delimited JSON records.
pub fn load_queries(path: impl AsRef<Path>) -> Result<Vec<QueryInstance>, AgentError> {
    let path = path.as_ref();
    let file = File::open(path)?;
    let mut queries = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let q: QueryInstance =
            serde_json::from_str(&line).map_err(|source| AgentError::BadQueryRecord {
                path: path.display().to_string(),
                line: i + 1,
                source,
            })?;
        queries.push(q);
    }
    Ok(queries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn passage(title: &str, text: &str) -> Passage {
        Passage {
            passage_id: "p#0".into(),
            title: title.into(),
            text: text.into(),
            word_count: text.split_whitespace().count(),
        }
    }

    fn query(input: &str, answers: &[&str]) -> QueryInstance {
        QueryInstance {
            query_id: "q1".into(),
            input: input.into(),
            answers: answers.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn agent(kind: OracleKind) -> AgentDescriptor {
        AgentDescriptor {
            agent_id: "a1".into(),
            tid: "t1".into(),
            mid: "m1".into(),
            k: 10,
            utility_kind: UtilityKind::ExactMatch,
            oracle: OracleAgentSpec {
                kind,
                noise_rate: 0.0,
                seed: 0,
            },
        }
    }

    #[test]
    fn normalize_fixed_point_and_declared_steps() {
        assert_eq!(normalize_answer("answer"), "answer");
        assert_eq!(normalize_answer("The  Answer!"), "answer");
        assert_eq!(normalize_answer("An apple, a day."), "apple day");
    }

    #[test]
    fn normalize_is_idempotent_on_random_strings() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let len = rng.gen_range(0..24);
            let s: String = (0..len).map(|_| rng.gen_range(' '..='~')).collect();
            let once = normalize_answer(&s);
            assert_eq!(normalize_answer(&once), once, "input {s:?}");
        }
    }

    #[test]
    fn exact_match_accepts_normal_form_equality() {
        let gold = vec!["paris".to_string()];
        assert_eq!(utility_exact_match("paris", &gold), 1);
        assert_eq!(utility_exact_match("THE Paris", &gold), 1);
        assert_eq!(utility_exact_match("londres", &gold), 0);
    }

    #[test]
    fn accuracy_trims_and_casefolds_only() {
        let gold = vec!["supports".to_string()];
        assert_eq!(utility_accuracy("SUPPORTS", &gold), 1);
        assert_eq!(utility_accuracy(" supports ", &gold), 1);
        assert_eq!(utility_accuracy("supported", &gold), 0);
        let gold2 = vec!["refutes".to_string()];
        assert_eq!(utility_accuracy(" refutes ", &gold2), 1);
    }

    #[test]
    fn containment_oracle_checks_substring() {
        let q = query("capital of france", &["Paris"]);
        let a = agent(OracleKind::Containment);
        assert_eq!(
            agent_feedback(&a, &q, &passage("X", "the capital is paris")),
            1
        );
        assert_eq!(
            agent_feedback(&a, &q, &passage("X", "the capital is lyon")),
            0
        );
    }

    #[test]
    fn title_sensitive_requires_query_term_in_title() {
        let q = query("capital france", &["Paris"]);
        let a = agent(OracleKind::TitleSensitive);
        // answer in body but no query term in the title -> 0; verify the two
        // predicates independently first
        let p = passage("Unrelated Heading", "it is paris for sure");
        assert!(normalize_answer(&p.text).contains("paris"));
        assert!(!tokenize(&p.title)
            .iter()
            .any(|t| t == "capital" || t == "france"));
        assert_eq!(agent_feedback(&a, &q, &p), 0);

        let grounded = passage("France Overview", "it is paris for sure");
        assert_eq!(agent_feedback(&a, &q, &grounded), 1);
    }

    #[test]
    fn position_sensitive_requires_answer_in_first_half() {
        let q = query("capital", &["paris"]);
        let a = agent(OracleKind::PositionSensitive);
        let filler = "word ".repeat(40);
        let early = passage("T", &format!("paris {filler}"));
        let late = passage("T", &format!("{filler} paris"));
        assert_eq!(agent_feedback(&a, &q, &early), 1);
        assert_eq!(agent_feedback(&a, &q, &late), 0);
    }

    #[test]
    fn feedback_ignores_tid_and_mid() {
        let q = query("capital", &["paris"]);
        let p = passage("T", "paris");
        let mut a1 = agent(OracleKind::Containment);
        let mut a2 = agent(OracleKind::Containment);
        a1.tid = "taskA".into();
        a2.tid = "taskB".into();
        a2.mid = "other".into();
        assert_eq!(agent_feedback(&a1, &q, &p), agent_feedback(&a2, &q, &p));
    }

    #[test]
    fn noise_is_deterministic_and_roughly_calibrated() {
        let mut a = agent(OracleKind::Containment);
        a.oracle.noise_rate = 0.2;
        a.oracle.seed = 9;
        let q = query("capital", &["paris"]);
        let mut flips = 0;
        for i in 0..5000 {
            let p = Passage {
                passage_id: format!("p#{i}"),
                title: "T".into(),
                text: "paris".into(),
                word_count: 1,
            };
            let first = agent_feedback(&a, &q, &p);
            assert_eq!(first, agent_feedback(&a, &q, &p));
            if first == 0 {
                flips += 1;
            }
        }
        let rate = flips as f64 / 5000.0;
        assert!((0.17..=0.23).contains(&rate), "flip rate {rate}");
    }

    #[test]
    fn roster_rejects_duplicate_agent_ids() {
        let a = agent(OracleKind::Containment);
        let json = serde_json::to_string(&vec![a.clone(), a]).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), json).unwrap();
        assert!(matches!(
            load_roster(f.path()),
            Err(AgentError::DuplicateAgent(id)) if id == "a1"
        ));
    }

    #[test]
    fn query_loader_reports_line_numbers() {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(
            f.path(),
            "{\"query_id\":\"q1\",\"input\":\"x\",\"answers\":[\"y\"]}\nnot json\n",
        )
        .unwrap();
        match load_queries(f.path()) {
            Err(AgentError::BadQueryRecord { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
