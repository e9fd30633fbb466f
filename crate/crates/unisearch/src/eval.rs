//! Downstream metrics, list-similarity analyses, significance tests, and
//! the iteration / batch-size sweeps.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::agents::{agent_feedback, AgentDescriptor, QueryInstance};
use crate::engine::SearchEngine;
use crate::reranker::{RerankerParams, ScoredDoc};
use crate::training::{offline_train, online_serve_train, OfflineConfig, OnlineConfig, QuerySets};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("outcome vectors have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("outcome vectors are empty")]
    EmptyOutcomes,
    #[error("agent {agent_id} references unknown task {tid}")]
    UnknownTask { agent_id: String, tid: String },
    #[error(transparent)]
    Engine(#[from] crate::engine::EngineError),
    #[error(transparent)]
    Session(#[from] crate::training::SessionError),
    #[error(transparent)]
    Reranker(#[from] crate::reranker::RerankerError),
}

/// Per-agent utilities plus the binary per-query outcomes behind them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_agent: BTreeMap<String, f64>,
    pub macro_average: f64,
    /// agent_id -> one 0/1 outcome per query, in query order.
    pub outcomes: BTreeMap<String, Vec<u8>>,
}

impl MetricReport {
    pub fn from_outcomes(outcomes: BTreeMap<String, Vec<u8>>) -> MetricReport {
        let per_agent: BTreeMap<String, f64> = outcomes
            .iter()
            .map(|(id, v)| {
                let u = if v.is_empty() {
                    0.0
                } else {
                    v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64
                };
                (id.clone(), u)
            })
            .collect();
        let macro_average = if per_agent.is_empty() {
            0.0
        } else {
            per_agent.values().sum::<f64>() / per_agent.len() as f64
        };
        MetricReport {
            per_agent,
            macro_average,
            outcomes,
        }
    }

    pub fn per_agent_csv(&self) -> String {
        let mut out = String::from("agent_id,utility,queries\n");
        for (id, u) in &self.per_agent {
            let n = self.outcomes.get(id).map_or(0, Vec::len);
            out.push_str(&format!("{id},{u},{n}\n"));
        }
        out
    }
}

/// 1 iff at least one served document gets positive feedback from the
/// agent's noise-free oracle.
pub fn query_success(
    engine: &SearchEngine,
    agent: &AgentDescriptor,
    query: &QueryInstance,
    served: &[ScoredDoc],
) -> u8 {
    let oracle = agent.noise_free();
    served.iter().any(|d| {
        let passage = engine
            .passage(&d.passage_id)
            .expect("served passage exists");
        agent_feedback(&oracle, query, passage) == 1
    }) as u8
}

/// Mean query success over aligned (query, served list) pairs.
pub fn downstream_utility(
    engine: &SearchEngine,
    agent: &AgentDescriptor,
    queries: &[QueryInstance],
    served_lists: &[Vec<ScoredDoc>],
) -> (f64, Vec<u8>) {
    assert_eq!(queries.len(), served_lists.len());
    let outcomes: Vec<u8> = queries
        .iter()
        .zip(served_lists)
        .map(|(q, docs)| query_success(engine, agent, q, docs))
        .collect();
    let utility = if outcomes.is_empty() {
        0.0
    } else {
        outcomes.iter().map(|&x| x as f64).sum::<f64>() / outcomes.len() as f64
    };
    (utility, outcomes)
}

/// Serves every agent's test queries with a fixed parameter snapshot and
/// reports utilities. `personalized = false` forces "unk" IDs at serve time.
pub fn evaluate_params(
    engine: &SearchEngine,
    params: &RerankerParams,
    roster: &[AgentDescriptor],
    test_sets: &QuerySets,
    first_stage_n: usize,
    personalized: bool,
) -> Result<MetricReport, EvalError> {
    let mut outcomes = BTreeMap::new();
    for agent in roster {
        let queries = test_sets
            .get(&agent.tid)
            .ok_or_else(|| EvalError::UnknownTask {
                agent_id: agent.agent_id.clone(),
                tid: agent.tid.clone(),
            })?;
        let ids = if personalized {
            agent.ids()
        } else {
            crate::reranker::AgentIds::unknown()
        };
        let mut lists = Vec::with_capacity(queries.len());
        for q in queries {
            lists.push(engine.retrieve(params, &ids, &q.input, first_stage_n, agent.k)?);
        }
        let (_, agent_outcomes) = downstream_utility(engine, agent, queries, &lists);
        outcomes.insert(agent.agent_id.clone(), agent_outcomes);
    }
    Ok(MetricReport::from_outcomes(outcomes))
}

/// Kendall's tau-a restricted to the items present in both lists, using
/// each list's relative order. Fewer than two common items yields 0.
pub fn kendall_tau(list_a: &[String], list_b: &[String]) -> f64 {
    kendall_tau_detail(list_a, list_b).tau
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TauDetail {
    pub tau: f64,
    pub common: usize,
    /// True when the intersection had <2 items and the 0 convention applied.
    pub degenerate: bool,
}

pub fn kendall_tau_detail(list_a: &[String], list_b: &[String]) -> TauDetail {
    let rank_b: BTreeMap<&str, usize> = list_b
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let common: Vec<(usize, usize)> = list_a
        .iter()
        .enumerate()
        .filter_map(|(i, id)| rank_b.get(id.as_str()).map(|&j| (i, j)))
        .collect();
    if common.len() < 2 {
        return TauDetail {
            tau: 0.0,
            common: common.len(),
            degenerate: true,
        };
    }
    let mut concordant = 0i64;
    let mut discordant = 0i64;
    for x in 0..common.len() {
        for y in (x + 1)..common.len() {
            let (a1, b1) = common[x];
            let (a2, b2) = common[y];
            if (a1 < a2) == (b1 < b2) {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    let pairs = (common.len() * (common.len() - 1) / 2) as f64;
    TauDetail {
        tau: (concordant - discordant) as f64 / pairs,
        common: common.len(),
        degenerate: false,
    }
}

/// Set overlap of the two lists; both empty yields 1 by convention.
pub fn jaccard(list_a: &[String], list_b: &[String]) -> f64 {
    let a: HashSet<&str> = list_a.iter().map(String::as_str).collect();
    let b: HashSet<&str> = list_b.iter().map(String::as_str).collect();
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(&b).count() as f64;
    let union = a.union(&b).count() as f64;
    inter / union
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McNemarMethod {
    ChiSquare,
    ExactBinomial,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McNemarResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n01: usize,
    pub n10: usize,
    pub method: McNemarMethod,
}

/// Paired McNemar test on two aligned binary outcome vectors. The statistic
/// is always the continuity-corrected form; with fewer than 25 discordant
/// pairs the p-value switches to the exact two-sided binomial test.
pub fn mcnemar(outcomes_a: &[u8], outcomes_b: &[u8]) -> Result<McNemarResult, EvalError> {
    if outcomes_a.len() != outcomes_b.len() {
        return Err(EvalError::LengthMismatch(
            outcomes_a.len(),
            outcomes_b.len(),
        ));
    }
    if outcomes_a.is_empty() {
        return Err(EvalError::EmptyOutcomes);
    }
    let mut n01 = 0usize; // a=0, b=1
    let mut n10 = 0usize; // a=1, b=0
    for (&a, &b) in outcomes_a.iter().zip(outcomes_b) {
        match (a, b) {
            (0, 1) => n01 += 1,
            (1, 0) => n10 += 1,
            _ => {}
        }
    }
    let n = n01 + n10;
    if n == 0 {
        return Ok(McNemarResult {
            statistic: 0.0,
            p_value: 1.0,
            n01,
            n10,
            method: McNemarMethod::ExactBinomial,
        });
    }
    let diff = n01.abs_diff(n10) as f64;
    let statistic = (diff - 1.0).max(0.0).powi(2) / n as f64;
    let (p_value, method) = if n < 25 {
        (
            binomial_two_sided(n01.min(n10), n),
            McNemarMethod::ExactBinomial,
        )
    } else {
        let chi = ChiSquared::new(1.0).expect("valid dof");
        (1.0 - chi.cdf(statistic), McNemarMethod::ChiSquare)
    };
    Ok(McNemarResult {
        statistic,
        p_value: p_value.min(1.0),
        n01,
        n10,
        method,
    })
}

/// Two-sided exact binomial p-value under p=1/2: twice the lower tail at
/// k = min(n01, n10), capped at 1.
fn binomial_two_sided(k: usize, n: usize) -> f64 {
    let mut tail = 0.0f64;
    let mut coeff = 1.0f64; // C(n, 0)
    for i in 0..=k {
        if i > 0 {
            coeff = coeff * (n - i + 1) as f64 / i as f64;
        }
        tail += coeff;
    }
    (2.0 * tail * 0.5f64.powi(n as i32)).min(1.0)
}

/// One grid point of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub point: String,
    pub macro_utility: f64,
}

pub fn sweep_csv(point_header: &str, rows: &[SweepRow]) -> String {
    let mut out = format!("{point_header},macro_utility\n");
    for r in rows {
        out.push_str(&format!("{},{}\n", r.point, r.macro_utility));
    }
    out
}

/// Runs one offline training pass and evaluates every intermediate
/// checkpoint (iteration 0 is the untrained starting point).
pub fn sweep_iterations(
    engine: &SearchEngine,
    roster: &[AgentDescriptor],
    train_sets: &QuerySets,
    test_sets: &QuerySets,
    config: &OfflineConfig,
) -> Result<(Vec<SweepRow>, Vec<RerankerParams>), EvalError> {
    let initial = RerankerParams::zeros();
    let run = offline_train(engine, initial.clone(), roster, train_sets, config)?;
    let mut checkpoints = vec![initial];
    checkpoints.extend(run.checkpoints);
    let mut rows = Vec::new();
    for (t, params) in checkpoints.iter().enumerate() {
        let report = evaluate_params(
            engine,
            params,
            roster,
            test_sets,
            config.first_stage_n,
            config.personalized,
        )?;
        rows.push(SweepRow {
            point: t.to_string(),
            macro_utility: report.macro_average,
        });
    }
    Ok((rows, checkpoints))
}

/// Utility of online sessions (one per agent, forked from the checkpoint)
/// measured on the lists actually served during the session.
pub fn online_macro_utility(
    engine: &SearchEngine,
    roster: &[AgentDescriptor],
    checkpoint: &RerankerParams,
    test_sets: &QuerySets,
    config: &OnlineConfig,
) -> Result<MetricReport, EvalError> {
    let mut outcomes = BTreeMap::new();
    for agent in roster {
        let queries = test_sets
            .get(&agent.tid)
            .ok_or_else(|| EvalError::UnknownTask {
                agent_id: agent.agent_id.clone(),
                tid: agent.tid.clone(),
            })?;
        let (served, _) =
            online_serve_train(engine, agent, checkpoint.clone(), queries, config.clone())?;
        let lists: Vec<Vec<ScoredDoc>> = served.into_iter().map(|(_, docs)| docs).collect();
        let (_, agent_outcomes) = downstream_utility(engine, agent, queries, &lists);
        outcomes.insert(agent.agent_id.clone(), agent_outcomes);
    }
    Ok(MetricReport::from_outcomes(outcomes))
}

/// Runs an online session per agent for each batch size and reports the
/// macro utility of the served lists.
pub fn sweep_batch_size(
    engine: &SearchEngine,
    roster: &[AgentDescriptor],
    checkpoint: &RerankerParams,
    test_sets: &QuerySets,
    base: &OnlineConfig,
    b_values: &[usize],
) -> Result<Vec<SweepRow>, EvalError> {
    let mut rows = Vec::new();
    for &b in b_values {
        let config = OnlineConfig {
            batch_queries: b,
            ..base.clone()
        };
        let report = online_macro_utility(engine, roster, checkpoint, test_sets, &config)?;
        rows.push(SweepRow {
            point: b.to_string(),
            macro_utility: report.macro_average,
        });
    }
    Ok(rows)
}

/// Cross-agent list similarity on a shared query set, served at a common
/// depth so lists are comparable.
#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceReport {
    /// Mean Jaccard over all unordered agent pairs and all queries.
    pub mean_jaccard: f64,
    /// Mean Kendall tau over pairs that share a model ID.
    pub mean_tau_same_mid: f64,
    /// Mean Kendall tau over pairs with different model IDs.
    pub mean_tau_cross_mid: f64,
    /// agent x agent matrix of mean Jaccard values, as CSV.
    pub jaccard_matrix_csv: String,
}

pub fn personalization_divergence(
    engine: &SearchEngine,
    params: &RerankerParams,
    roster: &[AgentDescriptor],
    queries: &[QueryInstance],
    depth: usize,
    first_stage_n: usize,
    personalized: bool,
) -> Result<DivergenceReport, EvalError> {
    let mut lists: Vec<Vec<Vec<String>>> = Vec::with_capacity(roster.len());
    for agent in roster {
        let ids = if personalized {
            agent.ids()
        } else {
            crate::reranker::AgentIds::unknown()
        };
        let mut per_query = Vec::with_capacity(queries.len());
        for q in queries {
            let docs = engine.retrieve(params, &ids, &q.input, first_stage_n, depth)?;
            per_query.push(docs.into_iter().map(|d| d.passage_id).collect::<Vec<_>>());
        }
        lists.push(per_query);
    }

    let n = roster.len();
    let mut matrix = vec![vec![0.0f64; n]; n];
    let (mut jac_sum, mut jac_n) = (0.0, 0usize);
    let (mut same_sum, mut same_n) = (0.0, 0usize);
    let (mut cross_sum, mut cross_n) = (0.0, 0usize);
    for i in 0..n {
        matrix[i][i] = 1.0;
        for j in (i + 1)..n {
            let mut pair_jac = 0.0;
            for (la, lb) in lists[i].iter().zip(&lists[j]) {
                let jc = jaccard(la, lb);
                let tau = kendall_tau(la, lb);
                pair_jac += jc;
                jac_sum += jc;
                jac_n += 1;
                if roster[i].mid == roster[j].mid {
                    same_sum += tau;
                    same_n += 1;
                } else {
                    cross_sum += tau;
                    cross_n += 1;
                }
            }
            pair_jac /= queries.len().max(1) as f64;
            matrix[i][j] = pair_jac;
            matrix[j][i] = pair_jac;
        }
    }

    let mut csv = String::from("agent_id");
    for a in roster {
        csv.push(',');
        csv.push_str(&a.agent_id);
    }
    csv.push('\n');
    for (i, a) in roster.iter().enumerate() {
        csv.push_str(&a.agent_id);
        for v in &matrix[i] {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }

    let mean = |sum: f64, n: usize| if n == 0 { 0.0 } else { sum / n as f64 };
    Ok(DivergenceReport {
        mean_jaccard: mean(jac_sum, jac_n),
        mean_tau_same_mid: mean(same_sum, same_n),
        mean_tau_cross_mid: mean(cross_sum, cross_n),
        jaccard_matrix_csv: csv,
    })
}
