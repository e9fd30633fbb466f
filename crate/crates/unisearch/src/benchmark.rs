//! Deterministic synthetic benchmark generator: a corpus, six query sets,
//! and an 18-agent roster (three oracle kinds per task).
//!
//! The generator plants, per query, 4 to 7 long positive passages that
//! contain all query terms and a unique answer token, buried under short
//! "chatter" passages that share two of the query's topic words. BM25's
//! length normalization favors the chatter, so the untrained engine serves
//! few positives and feedback-driven training has real headroom.
//!
//! Each positive is exactly one of three mutually exclusive layouts:
//! plain (nothing special), title-grounded (a query term in the title,
//! answer late), or early-answer (answer and query terms up front,
//! ungrounded title). No single passage satisfies both the title-sensitive
//! and position-sensitive oracles, and the specialized readers are served
//! short lists, so one shared ranking cannot satisfy every agent at once.
//! That is the headroom personalization is supposed to claim.

use std::collections::HashSet;
use std::fs;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::agents::{AgentDescriptor, OracleAgentSpec, OracleKind, QueryInstance, UtilityKind};
use crate::corpus::{to_tsv, RawDocument};
use crate::training::QuerySets;

pub const TASK_COUNT: usize = 6;
pub const TOPIC_WORDS_PER_TASK: usize = 16;
pub const TRAIN_QUERIES_PER_TASK: usize = 200;
pub const TEST_QUERIES_PER_TASK: usize = 256;
pub const CHATTER_PER_TASK: usize = 700;
pub const FILLER_DOCS: usize = 600;
/// Chance that a chatter passage's title is a topic word, putting
/// containment-free pressure on the title-overlap feature.
const CHATTER_GROUNDED_RATE: f64 = 0.5;

/// Model IDs, one per oracle kind: plain containment readers, readers that
/// need title-grounded evidence, and short-context readers that only see
/// the front of a passage. The specialized readers consume short lists.
pub const MODEL_IDS: [(&str, OracleKind, usize); 3] = [
    ("reader-plain", OracleKind::Containment, 10),
    ("reader-titled", OracleKind::TitleSensitive, 3),
    ("reader-short", OracleKind::PositionSensitive, 2),
];

/// The three positive layouts. Every query gets at least one of each.
#[derive(Clone, Copy, PartialEq)]
enum PositiveKind {
    Plain,
    Titled,
    Early,
}

pub struct Benchmark {
    pub documents: Vec<RawDocument>,
    pub roster: Vec<AgentDescriptor>,
    pub train_sets: QuerySets,
    pub test_sets: QuerySets,
}

const SYLLABLES: [&str; 20] = [
    "ba", "ce", "di", "fo", "gu", "ha", "je", "ki", "lo", "mu", "na", "pe", "qui", "ro", "su",
    "ta", "ve", "wi", "xo", "zy",
];

/// The i-th word of a letters-only synthetic vocabulary. Distinct indices
/// give distinct words; answers use digits, so no answer can appear here.
fn vocab_word(i: usize) -> String {
    let mut w = String::new();
    let mut n = i;
    for _ in 0..3 {
        w.push_str(SYLLABLES[n % SYLLABLES.len()]);
        n /= SYLLABLES.len();
    }
    w
}

fn task_id(t: usize) -> String {
    format!("task{}", t + 1)
}

/// Topic vocabulary for one task: 16 words disjoint from every other
/// task's topics and from the filler pool.
fn topic_words(t: usize) -> Vec<String> {
    (0..TOPIC_WORDS_PER_TASK)
        .map(|i| vocab_word(t * TOPIC_WORDS_PER_TASK + i))
        .collect()
}

/// Filler pool, offset past all topic words.
fn filler_word(rng: &mut ChaCha20Rng) -> String {
    vocab_word(TASK_COUNT * TOPIC_WORDS_PER_TASK + rng.gen_range(0..500))
}

fn filler_words(rng: &mut ChaCha20Rng, n: usize) -> Vec<String> {
    (0..n).map(|_| filler_word(rng)).collect()
}

/// Distinct 3-subsets of the task's 16 topic words, in random order.
fn query_term_sets(rng: &mut ChaCha20Rng, topics: &[String], n: usize) -> Vec<[usize; 3]> {
    let mut seen = HashSet::new();
    let mut sets = Vec::with_capacity(n);
    while sets.len() < n {
        let mut pick: Vec<usize> = (0..topics.len()).collect();
        pick.shuffle(rng);
        let mut triple = [pick[0], pick[1], pick[2]];
        triple.sort_unstable();
        if seen.insert(triple) {
            sets.push(triple);
        }
    }
    sets
}

struct PositiveLayout {
    body: String,
    title: String,
}

/// One long positive passage: ~80 filler words carrying all three query
/// terms and the answer. Early-answer positives also front-load the query
/// terms, so answer position is learnable from surface features.
fn positive_passage(
    rng: &mut ChaCha20Rng,
    terms: &[&str; 3],
    answer: &str,
    kind: PositiveKind,
) -> PositiveLayout {
    let mut words = filler_words(rng, 80);
    let mut inserts: Vec<(usize, String)> = Vec::new();
    let mut slots: Vec<usize> = if kind == PositiveKind::Early {
        // terms and answer inside the first ten words
        (0..10).collect()
    } else {
        // everything in the back half
        (55..78).collect()
    };
    slots.shuffle(rng);
    for (slot, term) in slots.iter().zip(terms.iter()) {
        inserts.push((*slot, term.to_string()));
    }
    inserts.push((slots[3], answer.to_string()));
    inserts.sort_by_key(|&(slot, _)| slot);
    for (offset, (slot, word)) in inserts.into_iter().enumerate() {
        words.insert(slot + offset, word);
    }
    let title = if kind == PositiveKind::Titled {
        format!("{} {}", terms[rng.gen_range(0..3)], filler_word(rng))
    } else {
        format!("{} {}", filler_word(rng), filler_word(rng))
    };
    PositiveLayout {
        body: words.join(" "),
        title,
    }
}

/// Generates the full benchmark from one seed. Same seed, same output.
pub fn generate(seed: u64) -> Benchmark {
    let mut documents = Vec::new();
    let mut train_sets = QuerySets::new();
    let mut test_sets = QuerySets::new();
    let mut answer_counter = 0usize;

    for t in 0..TASK_COUNT {
        let tid = task_id(t);
        let topics = topic_words(t);
        let mut rng = ChaCha20Rng::seed_from_u64(seed.wrapping_add(1 + t as u64));

        let total = TRAIN_QUERIES_PER_TASK + TEST_QUERIES_PER_TASK;
        let term_sets = query_term_sets(&mut rng, &topics, total);
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (qi, triple) in term_sets.iter().enumerate() {
            let split = if qi < TRAIN_QUERIES_PER_TASK {
                "train"
            } else {
                "test"
            };
            let local = if qi < TRAIN_QUERIES_PER_TASK {
                qi
            } else {
                qi - TRAIN_QUERIES_PER_TASK
            };
            let query_id = format!("{tid}-{split}-{local:04}");
            let terms = [
                topics[triple[0]].as_str(),
                topics[triple[1]].as_str(),
                topics[triple[2]].as_str(),
            ];
            let answer = format!("ans{answer_counter:05}");
            answer_counter += 1;

            let n_pos = rng.gen_range(4..=7);
            let mut kinds = vec![
                PositiveKind::Plain,
                PositiveKind::Titled,
                PositiveKind::Early,
            ];
            for _ in 3..n_pos {
                kinds.push(
                    [
                        PositiveKind::Plain,
                        PositiveKind::Titled,
                        PositiveKind::Early,
                    ][rng.gen_range(0..3)],
                );
            }
            kinds.shuffle(&mut rng);
            for (p, kind) in kinds.into_iter().enumerate() {
                let layout = positive_passage(&mut rng, &terms, &answer, kind);
                documents.push(RawDocument {
                    doc_id: format!("{query_id}-p{p}"),
                    title: layout.title,
                    body: layout.body,
                });
            }

            let instance = QueryInstance {
                query_id,
                input: terms.join(" "),
                answers: vec![answer],
            };
            if split == "train" {
                train.push(instance);
            } else {
                test.push(instance);
            }
        }

        // short chatter passages sharing two topic words; no answers, so
        // they are hard negatives that BM25 loves
        for c in 0..CHATTER_PER_TASK {
            let a = rng.gen_range(0..TOPIC_WORDS_PER_TASK);
            let mut b = rng.gen_range(0..TOPIC_WORDS_PER_TASK - 1);
            if b >= a {
                b += 1;
            }
            let n_words = rng.gen_range(8..=13);
            let mut words = filler_words(&mut rng, n_words);
            words.insert(rng.gen_range(0..words.len()), topics[a].clone());
            words.insert(rng.gen_range(0..words.len()), topics[b].clone());
            let title = if rng.gen_bool(CHATTER_GROUNDED_RATE) {
                topics[rng.gen_range(0..TOPIC_WORDS_PER_TASK)].clone()
            } else {
                filler_word(&mut rng)
            };
            documents.push(RawDocument {
                doc_id: format!("{tid}-c{c:04}"),
                title,
                body: words.join(" "),
            });
        }

        train_sets.insert(tid.clone(), train);
        test_sets.insert(tid.clone(), test);
    }

    // topic-free background documents
    let mut rng = ChaCha20Rng::seed_from_u64(seed.wrapping_add(0x00ff));
    for f in 0..FILLER_DOCS {
        documents.push(RawDocument {
            doc_id: format!("bg-{f:04}"),
            title: format!("{} {}", filler_word(&mut rng), filler_word(&mut rng)),
            body: filler_words(&mut rng, 40).join(" "),
        });
    }

    let roster = make_roster(seed);
    Benchmark {
        documents,
        roster,
        train_sets,
        test_sets,
    }
}

/// 18 agents: every task paired with each of the three model kinds.
pub fn make_roster(seed: u64) -> Vec<AgentDescriptor> {
    let mut roster = Vec::new();
    for t in 0..TASK_COUNT {
        let tid = task_id(t);
        let utility_kind = if t < 4 {
            UtilityKind::ExactMatch
        } else {
            UtilityKind::Accuracy
        };
        for (m, (mid, kind, k)) in MODEL_IDS.iter().enumerate() {
            roster.push(AgentDescriptor {
                agent_id: format!("{tid}-{mid}"),
                tid: tid.clone(),
                mid: mid.to_string(),
                k: *k,
                utility_kind,
                oracle: OracleAgentSpec {
                    kind: *kind,
                    noise_rate: 0.0,
                    seed: seed
                        .wrapping_mul(31)
                        .wrapping_add((t * MODEL_IDS.len() + m) as u64),
                },
            });
        }
    }
    roster
}

/// Writes corpus.tsv, roster.json, and per-task query files under `out`.
pub fn write_benchmark(bench: &Benchmark, out: &Path) -> io::Result<()> {
    fs::create_dir_all(out.join("queries"))?;
    fs::write(out.join("corpus.tsv"), to_tsv(&bench.documents))?;
    let roster = serde_json::to_string_pretty(&bench.roster)?;
    fs::write(out.join("roster.json"), roster + "\n")?;
    for (sets, split) in [(&bench.train_sets, "train"), (&bench.test_sets, "test")] {
        for (tid, queries) in sets.iter() {
            let mut lines = String::new();
            for q in queries {
                lines.push_str(&serde_json::to_string(q)?);
                lines.push('\n');
            }
            fs::write(
                out.join("queries").join(format!("{tid}.{split}.jsonl")),
                lines,
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::agent_feedback;
    use crate::corpus::{split_document, Passage};

    #[test]
    fn generation_is_deterministic() {
        let a = generate(7);
        let b = generate(7);
        assert_eq!(a.documents, b.documents);
        assert_eq!(a.roster, b.roster);
        assert_eq!(a.train_sets, b.train_sets);
        assert_eq!(a.test_sets, b.test_sets);
        let c = generate(8);
        assert_ne!(a.documents, c.documents);
    }

    #[test]
    fn shapes_match_the_declared_constants() {
        let bench = generate(3);
        assert_eq!(bench.roster.len(), 18);
        assert_eq!(bench.train_sets.len(), TASK_COUNT);
        assert_eq!(bench.test_sets.len(), TASK_COUNT);
        for queries in bench.train_sets.values() {
            assert_eq!(queries.len(), TRAIN_QUERIES_PER_TASK);
        }
        for queries in bench.test_sets.values() {
            assert_eq!(queries.len(), TEST_QUERIES_PER_TASK);
        }
        let ids: HashSet<&str> = bench.documents.iter().map(|d| d.doc_id.as_str()).collect();
        assert_eq!(ids.len(), bench.documents.len(), "doc ids unique");
        // every document fits a single 100-word passage
        for d in &bench.documents {
            assert_eq!(split_document(d, 100).len(), 1, "{}", d.doc_id);
        }
    }

    #[test]
    fn query_ids_and_answers_are_unique() {
        let bench = generate(3);
        let mut qids = HashSet::new();
        let mut answers = HashSet::new();
        for sets in [&bench.train_sets, &bench.test_sets] {
            for queries in sets.values() {
                for q in queries {
                    assert!(qids.insert(q.query_id.clone()));
                    assert_eq!(q.answers.len(), 1);
                    assert!(answers.insert(q.answers[0].clone()));
                    assert_eq!(q.input.split_whitespace().count(), 3);
                }
            }
        }
    }

    #[test]
    fn positives_satisfy_their_query_and_chatter_never_does() {
        let bench = generate(3);
        let all_queries: Vec<&QueryInstance> = bench
            .train_sets
            .values()
            .chain(bench.test_sets.values())
            .flatten()
            .collect();
        let containment = bench
            .roster
            .iter()
            .find(|a| a.oracle.kind == OracleKind::Containment)
            .unwrap();
        let mut positives = 0;
        for d in &bench.documents {
            let is_positive = d.doc_id.contains("-p");
            let passage = Passage {
                passage_id: format!("{}#0", d.doc_id),
                title: d.title.clone(),
                text: d.body.clone(),
                word_count: d.body.split_whitespace().count(),
            };
            if is_positive {
                positives += 1;
                let qid = d.doc_id.rsplit_once("-p").unwrap().0;
                let query = all_queries.iter().find(|q| q.query_id == qid).unwrap();
                assert_eq!(agent_feedback(containment, query, &passage), 1);
                for term in query.input.split_whitespace() {
                    assert!(passage.text.contains(term), "{} missing {term}", d.doc_id);
                }
            } else {
                // no answer token anywhere outside positives
                assert!(!d.body.contains("ans"), "{}", d.doc_id);
            }
        }
        let queries = all_queries.len() as f64;
        let mean_pos = positives as f64 / queries;
        assert!((4.0..=7.0).contains(&mean_pos));
    }

    #[test]
    fn oracle_kinds_disagree_on_a_fraction_of_positives() {
        let bench = generate(3);
        let by_kind = |kind| {
            bench
                .roster
                .iter()
                .find(|a| a.oracle.kind == kind)
                .unwrap()
                .clone()
        };
        let contain = by_kind(OracleKind::Containment);
        let titled = by_kind(OracleKind::TitleSensitive);
        let position = by_kind(OracleKind::PositionSensitive);
        let all_queries: Vec<&QueryInstance> = bench
            .train_sets
            .values()
            .chain(bench.test_sets.values())
            .flatten()
            .collect();
        let (mut total, mut titled_pos, mut early_pos) = (0.0, 0.0, 0.0);
        for d in bench.documents.iter().filter(|d| d.doc_id.contains("-p")) {
            let qid = d.doc_id.rsplit_once("-p").unwrap().0;
            let query = all_queries.iter().find(|q| q.query_id == qid).unwrap();
            let passage = Passage {
                passage_id: format!("{}#0", d.doc_id),
                title: d.title.clone(),
                text: d.body.clone(),
                word_count: d.body.split_whitespace().count(),
            };
            assert_eq!(agent_feedback(&contain, query, &passage), 1);
            total += 1.0;
            let t = agent_feedback(&titled, query, &passage);
            let e = agent_feedback(&position, query, &passage);
            assert!(!(t == 1 && e == 1), "{} satisfies both readers", d.doc_id);
            titled_pos += t as f64;
            early_pos += e as f64;
        }
        // each specialized layout is roughly a third of all positives,
        // and no positive satisfies both specialized oracles at once
        assert!(
            (0.28..0.40).contains(&(titled_pos / total)),
            "{}",
            titled_pos / total
        );
        assert!(
            (0.28..0.40).contains(&(early_pos / total)),
            "{}",
            early_pos / total
        );
    }

    #[test]
    fn written_benchmark_round_trips() {
        let bench = generate(5);
        let dir = tempfile::tempdir().unwrap();
        write_benchmark(&bench, dir.path()).unwrap();
        let docs = crate::corpus::load_tsv(dir.path().join("corpus.tsv"), true).unwrap();
        assert_eq!(docs, bench.documents);
        let roster = crate::agents::load_roster(dir.path().join("roster.json")).unwrap();
        assert_eq!(roster, bench.roster);
        let q = crate::agents::load_queries(dir.path().join("queries/task1.train.jsonl")).unwrap();
        assert_eq!(q, bench.train_sets["task1"]);
    }
}
