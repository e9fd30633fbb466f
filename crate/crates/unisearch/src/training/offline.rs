//! Offline iterative training over the whole agent roster.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::agents::{agent_feedback, AgentDescriptor, FeedbackRecord};
use crate::engine::SearchEngine;
use crate::reranker::{apply_id_dropout, rerank, train, AgentIds, RerankerError, RerankerParams};

use super::{derive_seed, DatasetRecord, IterationDataset, OfflineConfig, QuerySets};

/// E-step: retrieve and rerank for every (agent, training query) pair with
/// the current parameters and collect per-document feedback. The dataset
/// starts empty each iteration.
pub fn e_step_collect(
    engine: &SearchEngine,
    params: &RerankerParams,
    roster: &[AgentDescriptor],
    train_sets: &QuerySets,
    config: &OfflineConfig,
    iteration: u32,
) -> Result<IterationDataset, RerankerError> {
    let mut dataset = IterationDataset {
        iteration,
        source_tag: format!("theta_{}", iteration.saturating_sub(1)),
        ..Default::default()
    };

    for agent in roster {
        let ids = if config.personalized {
            agent.ids()
        } else {
            AgentIds::unknown()
        };
        let Some(queries) = train_sets.get(&agent.tid) else {
            continue;
        };
        for query in queries {
            let candidates = engine.candidates(&query.input, config.first_stage_n);
            if candidates.is_empty() {
                dataset.skipped_queries += 1;
                continue;
            }
            let served = rerank(params, &ids, candidates, config.k_train)?;
            for doc in served {
                let passage = engine
                    .passage(&doc.passage_id)
                    .expect("served passage exists in the store");
                let label = agent_feedback(agent, query, passage);
                dataset.records.push(DatasetRecord {
                    feedback: FeedbackRecord {
                        query_id: query.query_id.clone(),
                        agent_id: agent.agent_id.clone(),
                        passage_id: doc.passage_id.clone(),
                        label,
                    },
                    ids: ids.clone(),
                    features: doc.features,
                });
            }
        }
    }
    Ok(dataset)
}

/// M-step: ID dropout on a seeded copy of the dataset, then gradient
/// training warm-started from the incoming parameters.
pub fn m_step_update(
    params: RerankerParams,
    dataset: &IterationDataset,
    config: &OfflineConfig,
) -> Result<RerankerParams, RerankerError> {
    if dataset.records.is_empty() {
        return Err(RerankerError::EmptyDataset);
    }
    let mut examples = dataset.to_examples();
    let dropout_seed = derive_seed(config.seed, 1000 + dataset.iteration as u64);
    let mut rng = ChaCha20Rng::seed_from_u64(dropout_seed);
    apply_id_dropout(&mut examples, config.unk_rate, &mut rng);

    let train_seed = derive_seed(config.seed, 2000 + dataset.iteration as u64);
    train(
        params,
        &examples,
        config.epochs,
        &config.optimizer,
        train_seed,
    )
}

/// Feedback-positive rates observed while collecting iteration `iteration`'s
/// dataset; they measure the parameters that did the retrieving.
#[derive(Debug, Clone)]
pub struct IterationMetrics {
    /// Index of the parameter snapshot being measured (0 = untrained).
    pub params_iteration: u32,
    pub per_agent_positive_rate: BTreeMap<String, f64>,
    pub mean_positive_rate: f64,
}

impl IterationMetrics {
    fn from_dataset(dataset: &IterationDataset) -> Self {
        let mut pos: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for r in &dataset.records {
            let slot = pos.entry(r.feedback.agent_id.clone()).or_insert((0, 0));
            slot.0 += r.feedback.label as usize;
            slot.1 += 1;
        }
        let per_agent: BTreeMap<String, f64> = pos
            .into_iter()
            .map(|(id, (p, n))| (id, p as f64 / n as f64))
            .collect();
        let mean = if per_agent.is_empty() {
            0.0
        } else {
            per_agent.values().sum::<f64>() / per_agent.len() as f64
        };
        IterationMetrics {
            params_iteration: dataset.iteration.saturating_sub(1),
            per_agent_positive_rate: per_agent,
            mean_positive_rate: mean,
        }
    }
}

/// Result of an offline training run: one checkpoint per iteration plus the
/// positive-rate proxies observed along the way.
pub struct OfflineRun {
    /// `checkpoints[t]` is theta^{t+1} in iteration terms.
    pub checkpoints: Vec<RerankerParams>,
    /// `metrics[t]` measures the parameters that served iteration t+1's
    /// E-step, i.e. theta^t (so `metrics[0]` measures the untrained model).
    pub metrics: Vec<IterationMetrics>,
}

/// Runs `iterations` rounds of E-step collection and M-step retraining.
pub fn offline_train(
    engine: &SearchEngine,
    initial: RerankerParams,
    roster: &[AgentDescriptor],
    train_sets: &QuerySets,
    config: &OfflineConfig,
) -> Result<OfflineRun, RerankerError> {
    let mut params = initial;
    let mut run = OfflineRun {
        checkpoints: Vec::new(),
        metrics: Vec::new(),
    };
    for t in 1..=config.iterations {
        let dataset = e_step_collect(engine, &params, roster, train_sets, config, t)?;
        run.metrics.push(IterationMetrics::from_dataset(&dataset));
        params = m_step_update(params, &dataset, config)?;
        run.checkpoints.push(params.clone());
    }
    Ok(run)
}
