//! Iterative utility maximization: offline EM-style training over all
//! agents, and online per-agent adaptation during serving.
//!
//! Offline, each iteration retrieves top-k documents for every agent's
//! training queries with the current parameters (E-step), collects binary
//! per-document feedback, and retrains the reranker on those labels
//! (M-step), warm-starting from the incoming parameters. Online, each agent
//! gets an isolated session forked from the offline checkpoint that
//! retrains on its own accumulated feedback every `b` served queries.

mod offline;
mod online;

pub use offline::{e_step_collect, m_step_update, offline_train, IterationMetrics, OfflineRun};
pub use online::{online_serve_train, AgentSession, SessionError};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::agents::{FeedbackRecord, QueryInstance};
use crate::reranker::{AgentIds, FeatureVector, OptimizerConfig, TrainExample};

/// Training query sets keyed by task ID.
pub type QuerySets = BTreeMap<String, Vec<QueryInstance>>;

/// One feedback record joined with the features it was retrieved under.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub feedback: FeedbackRecord,
    pub ids: AgentIds,
    pub features: FeatureVector,
}

impl DatasetRecord {
    pub fn to_example(&self) -> TrainExample {
        TrainExample {
            ids: self.ids.clone(),
            features: self.features.clone(),
            label: self.feedback.label,
        }
    }
}

/// The feedback set collected in one E-step. Reset at the start of every
/// offline iteration.
#[derive(Debug, Clone, Default)]
pub struct IterationDataset {
    pub records: Vec<DatasetRecord>,
    pub iteration: u32,
    /// Tag of the parameter snapshot that retrieved these records.
    pub source_tag: String,
    /// Queries that produced zero first-stage candidates.
    pub skipped_queries: usize,
}

impl IterationDataset {
    pub fn to_examples(&self) -> Vec<TrainExample> {
        self.records.iter().map(DatasetRecord::to_example).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OfflineConfig {
    /// Number of EM iterations.
    pub iterations: u32,
    /// Retrieval depth during offline feedback collection.
    pub k_train: usize,
    /// Training epochs per M-step.
    pub epochs: u32,
    /// Fraction of samples whose IDs are replaced with "unk".
    pub unk_rate: f64,
    pub first_stage_n: usize,
    /// When false, all IDs are forced to "unk" throughout (the
    /// non-personalized ablation).
    pub personalized: bool,
    pub seed: u64,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

impl Default for OfflineConfig {
    fn default() -> Self {
        OfflineConfig {
            iterations: 3,
            k_train: 32,
            epochs: 2,
            unk_rate: 0.1,
            first_stage_n: 100,
            personalized: true,
            seed: 0,
            optimizer: OptimizerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OnlineConfig {
    /// Number of served queries between parameter updates.
    pub batch_queries: usize,
    /// Training epochs per online update.
    pub epochs: u32,
    pub first_stage_n: usize,
    pub seed: u64,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        OnlineConfig {
            batch_queries: 256,
            epochs: 2,
            first_stage_n: 100,
            seed: 0,
            optimizer: OptimizerConfig::default(),
        }
    }
}

/// Derives a stream-specific seed so distinct pipeline stages never share
/// random state.
pub(crate) fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9e3779b97f4a7c15)
        .wrapping_add(stream.wrapping_mul(0xd1342543de82ef95));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
