//! Per-agent online adaptation during serving.
//!
//! A session is forked from an offline checkpoint and is fully isolated:
//! no parameters are shared across sessions. Queries are served strictly in
//! arrival order; the parameters used for query t depend only on feedback
//! from earlier completed batches, never on t's own feedback.

use std::collections::HashMap;

use thiserror::Error;

use crate::agents::{agent_feedback, AgentDescriptor};
use crate::engine::{EngineError, SearchEngine};
use crate::reranker::{train, AgentIds, RerankerError, RerankerParams, ScoredDoc, TrainExample};

use super::{derive_seed, OnlineConfig};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("query {0} was already served in this session")]
    AlreadyServed(String),
    #[error("feedback for unknown query {0}")]
    UnknownQuery(String),
    #[error("feedback for query {0} was already submitted")]
    AlreadyFinalized(String),
    #[error("label for passage {passage_id} which was not served for query {query_id}")]
    UnservedPassage {
        query_id: String,
        passage_id: String,
    },
    #[error("feedback for query {query_id} is missing labels for: {missing:?}")]
    MissingLabels {
        query_id: String,
        missing: Vec<String>,
    },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Reranker(#[from] RerankerError),
}

struct ServedQuery {
    docs: Vec<ScoredDoc>,
    finalized: bool,
}

/// One agent's serving-time state: a private parameter fork plus the
/// growing feedback dataset.
pub struct AgentSession {
    pub agent_id: String,
    pub ids: AgentIds,
    pub k: usize,
    pub params: RerankerParams,
    config: OnlineConfig,
    served: HashMap<String, ServedQuery>,
    /// Accumulated feedback dataset; only grows.
    records: Vec<TrainExample>,
    served_count: usize,
    completed_queries: usize,
    update_count: u32,
}

impl AgentSession {
    pub fn new(
        agent_id: impl Into<String>,
        ids: AgentIds,
        k: usize,
        offline_checkpoint: RerankerParams,
        config: OnlineConfig,
    ) -> Self {
        AgentSession {
            agent_id: agent_id.into(),
            ids,
            k,
            params: offline_checkpoint,
            config,
            served: HashMap::new(),
            records: Vec::new(),
            served_count: 0,
            completed_queries: 0,
            update_count: 0,
        }
    }

    pub fn from_agent(
        agent: &AgentDescriptor,
        offline_checkpoint: RerankerParams,
        config: OnlineConfig,
    ) -> Self {
        Self::new(
            agent.agent_id.clone(),
            agent.ids(),
            agent.k,
            offline_checkpoint,
            config,
        )
    }

    pub fn served_count(&self) -> usize {
        self.served_count
    }

    pub fn update_count(&self) -> u32 {
        self.update_count
    }

    pub fn dataset_len(&self) -> usize {
        self.records.len()
    }

    /// Serves one query with the current parameter snapshot and records the
    /// list as pending feedback. A query id can be served at most once.
    pub fn serve(
        &mut self,
        engine: &SearchEngine,
        query_id: &str,
        input: &str,
    ) -> Result<Vec<ScoredDoc>, SessionError> {
        if self.served.contains_key(query_id) {
            return Err(SessionError::AlreadyServed(query_id.to_string()));
        }
        let docs = engine.retrieve(
            &self.params,
            &self.ids,
            input,
            self.config.first_stage_n,
            self.k,
        )?;
        self.served.insert(
            query_id.to_string(),
            ServedQuery {
                docs: docs.clone(),
                finalized: false,
            },
        );
        self.served_count += 1;
        Ok(docs)
    }

    /// Accepts per-document labels for a served query. Labels must cover
    /// exactly the served passage ids. When the number of completed queries
    /// reaches a multiple of the batch size, retrains on the full
    /// accumulated dataset (no ID dropout) and returns the new counter.
    pub fn submit_feedback(
        &mut self,
        query_id: &str,
        labels: &[(String, u8)],
    ) -> Result<u32, SessionError> {
        let entry = self
            .served
            .get(query_id)
            .ok_or_else(|| SessionError::UnknownQuery(query_id.to_string()))?;
        if entry.finalized {
            return Err(SessionError::AlreadyFinalized(query_id.to_string()));
        }

        let served_ids: Vec<&str> = entry.docs.iter().map(|d| d.passage_id.as_str()).collect();
        for (pid, _) in labels {
            if !served_ids.contains(&pid.as_str()) {
                return Err(SessionError::UnservedPassage {
                    query_id: query_id.to_string(),
                    passage_id: pid.clone(),
                });
            }
        }
        let missing: Vec<String> = served_ids
            .iter()
            .filter(|pid| !labels.iter().any(|(l, _)| l == **pid))
            .map(|s| s.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(SessionError::MissingLabels {
                query_id: query_id.to_string(),
                missing,
            });
        }

        // append in served order so the dataset is deterministic
        let entry = self.served.get_mut(query_id).unwrap();
        entry.finalized = true;
        for doc in &entry.docs {
            let label = labels
                .iter()
                .find(|(pid, _)| pid == &doc.passage_id)
                .map(|&(_, l)| l)
                .unwrap();
            self.records.push(TrainExample {
                ids: self.ids.clone(),
                features: doc.features.clone(),
                label,
            });
        }
        self.completed_queries += 1;

        if self.completed_queries % self.config.batch_queries == 0 {
            let seed = derive_seed(self.config.seed, 3000 + self.update_count as u64);
            self.params = train(
                self.params.clone(),
                &self.records,
                self.config.epochs,
                &self.config.optimizer,
                seed,
            )?;
            self.update_count += 1;
        }
        Ok(self.update_count)
    }
}

/// Runs a full online session in-process: serve each query in order, have
/// the oracle agent label every served document, and feed the labels back.
pub fn online_serve_train(
    engine: &SearchEngine,
    agent: &AgentDescriptor,
    offline_checkpoint: RerankerParams,
    queries: &[crate::agents::QueryInstance],
    config: OnlineConfig,
) -> Result<(Vec<(String, Vec<ScoredDoc>)>, AgentSession), SessionError> {
    let mut session = AgentSession::from_agent(agent, offline_checkpoint, config);
    let mut served_lists = Vec::with_capacity(queries.len());
    for query in queries {
        let docs = session.serve(engine, &query.query_id, &query.input)?;
        let labels: Vec<(String, u8)> = docs
            .iter()
            .map(|d| {
                let passage = engine
                    .passage(&d.passage_id)
                    .expect("served passage exists");
                (d.passage_id.clone(), agent_feedback(agent, query, passage))
            })
            .collect();
        session.submit_feedback(&query.query_id, &labels)?;
        served_lists.push((query.query_id.clone(), docs));
    }
    Ok((served_lists, session))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{OracleAgentSpec, OracleKind, QueryInstance, UtilityKind};
    use crate::corpus::{PassageStore, RawDocument};

    fn engine() -> SearchEngine {
        let docs: Vec<RawDocument> = (0..8)
            .map(|i| RawDocument {
                doc_id: format!("d{i}"),
                title: format!("Title {i}"),
                body: if i % 2 == 0 {
                    format!("paris capital france entry {i}")
                } else {
                    format!("berlin capital germany entry {i}")
                },
            })
            .collect();
        SearchEngine::new(PassageStore::from_documents(&docs, 100).unwrap()).unwrap()
    }

    fn agent(b_unused: usize) -> AgentDescriptor {
        let _ = b_unused;
        AgentDescriptor {
            agent_id: "a1".into(),
            tid: "t1".into(),
            mid: "m1".into(),
            k: 3,
            utility_kind: UtilityKind::ExactMatch,
            oracle: OracleAgentSpec {
                kind: OracleKind::Containment,
                noise_rate: 0.0,
                seed: 0,
            },
        }
    }

    fn queries(n: usize) -> Vec<QueryInstance> {
        (0..n)
            .map(|i| QueryInstance {
                query_id: format!("q{i}"),
                input: "capital".into(),
                answers: vec!["paris".into()],
            })
            .collect()
    }

    fn config(b: usize) -> OnlineConfig {
        OnlineConfig {
            batch_queries: b,
            ..Default::default()
        }
    }

    #[test]
    fn fewer_than_b_queries_never_update() {
        let engine = engine();
        let (_, session) = online_serve_train(
            &engine,
            &agent(0),
            RerankerParams::zeros(),
            &queries(3),
            config(4),
        )
        .unwrap();
        assert_eq!(session.update_count(), 0);
        assert_eq!(session.params, RerankerParams::zeros());
    }

    #[test]
    fn two_b_queries_update_twice_on_growing_dataset() {
        let engine = engine();
        let (_, session) = online_serve_train(
            &engine,
            &agent(0),
            RerankerParams::zeros(),
            &queries(8),
            config(4),
        )
        .unwrap();
        assert_eq!(session.update_count(), 2);
        // all 8 queries' records are in the accumulated dataset
        assert_eq!(session.dataset_len(), 8 * 3);
    }

    #[test]
    fn truncated_stream_serves_identical_prefix() {
        let engine = engine();
        let full = queries(10);
        let (lists_full, _) = online_serve_train(
            &engine,
            &agent(0),
            RerankerParams::zeros(),
            &full,
            config(4),
        )
        .unwrap();
        for cut in [3, 6, 9] {
            let (lists_cut, _) = online_serve_train(
                &engine,
                &agent(0),
                RerankerParams::zeros(),
                &full[..cut],
                config(4),
            )
            .unwrap();
            assert_eq!(&lists_full[..cut], &lists_cut[..]);
        }
    }

    #[test]
    fn duplicate_query_and_bad_feedback_are_rejected() {
        let engine = engine();
        let mut session = AgentSession::from_agent(&agent(0), RerankerParams::zeros(), config(4));
        let docs = session.serve(&engine, "q1", "capital").unwrap();
        assert!(matches!(
            session.serve(&engine, "q1", "capital"),
            Err(SessionError::AlreadyServed(_))
        ));
        assert!(matches!(
            session.submit_feedback("nope", &[]),
            Err(SessionError::UnknownQuery(_))
        ));
        assert!(matches!(
            session.submit_feedback("q1", &[("ghost#0".into(), 1)]),
            Err(SessionError::UnservedPassage { .. })
        ));
        let partial: Vec<(String, u8)> = docs
            .iter()
            .take(1)
            .map(|d| (d.passage_id.clone(), 1))
            .collect();
        match session.submit_feedback("q1", &partial) {
            Err(SessionError::MissingLabels { missing, .. }) => {
                assert_eq!(missing.len(), docs.len() - 1)
            }
            other => panic!("unexpected {other:?}"),
        }
        let complete: Vec<(String, u8)> = docs.iter().map(|d| (d.passage_id.clone(), 1)).collect();
        assert_eq!(session.submit_feedback("q1", &complete).unwrap(), 0);
        assert!(matches!(
            session.submit_feedback("q1", &complete),
            Err(SessionError::AlreadyFinalized(_))
        ));
    }
}
