//! The trainable relevance scorer.
//!
//! A linear model over hand-crafted query/document features with additive
//! per-task-ID and per-model-ID weight deltas:
//!
//! ```text
//! p(R=1 | x, d) = sigmoid((w_shared + w_tid + w_mid) . phi(x, d)
//!                         + b_shared + b_tid + b_mid)
//! ```
//!
//! Unknown IDs and the reserved `"unk"` token contribute zero deltas, so
//! unseen agents degrade gracefully to the shared model. Scoring against an
//! immutable parameter snapshot is safe concurrently; training operates on
//! an owned copy and the caller publishes the result atomically.

mod features;
mod train;

pub use features::{extract_features, FeatureVector, FEATURE_DIM, FEATURE_SCHEMA_VERSION};
pub use train::{
    apply_id_dropout, bce_loss_and_grad, train, Gradient, OptimizerConfig, TrainExample,
};

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::index::Candidate;

/// Reserved token meaning "no identity": contributes zero deltas and is
/// never trained.
pub const UNK_ID: &str = "unk";

#[derive(Debug, Error)]
pub enum RerankerError {
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite loss at batch {batch} (epoch {epoch})")]
    NonFiniteLoss { epoch: u32, batch: usize },
    #[error("empty training dataset")]
    EmptyDataset,
    #[error("checkpoint io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint is malformed: {0}")]
    Malformed(String),
    #[error("checkpoint format version {got} unsupported (expected {expected})")]
    FormatVersion { got: u32, expected: u32 },
    #[error("checkpoint feature schema version {got} does not match {expected}")]
    SchemaVersion { got: u32, expected: u32 },
}

/// Task-ID / model-ID pair identifying what kind of agent a request is for.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AgentIds {
    pub tid: String,
    pub mid: String,
}

impl AgentIds {
    pub fn new(tid: impl Into<String>, mid: impl Into<String>) -> Self {
        AgentIds {
            tid: tid.into(),
            mid: mid.into(),
        }
    }

    pub fn unknown() -> Self {
        AgentIds::new(UNK_ID, UNK_ID)
    }
}

/// Additive weight/bias component for one task or model ID.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdDelta {
    pub w: Vec<f64>,
    pub bias: f64,
}

impl IdDelta {
    fn zero() -> Self {
        IdDelta {
            w: vec![0.0; FEATURE_DIM],
            bias: 0.0,
        }
    }
}

/// Adam first/second moment accumulators for one parameter block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m_w: Vec<f64>,
    pub v_w: Vec<f64>,
    pub m_bias: f64,
    pub v_bias: f64,
}

impl Moments {
    fn zero() -> Self {
        Moments {
            m_w: vec![0.0; FEATURE_DIM],
            v_w: vec![0.0; FEATURE_DIM],
            m_bias: 0.0,
            v_bias: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub shared: Moments,
    pub tid: BTreeMap<String, Moments>,
    pub mid: BTreeMap<String, Moments>,
}

impl AdamState {
    fn zero() -> Self {
        AdamState {
            step: 0,
            shared: Moments::zero(),
            tid: BTreeMap::new(),
            mid: BTreeMap::new(),
        }
    }
}

/// The full trainable parameter set, including optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankerParams {
    pub w_shared: Vec<f64>,
    pub bias_shared: f64,
    pub tid_deltas: BTreeMap<String, IdDelta>,
    pub mid_deltas: BTreeMap<String, IdDelta>,
    pub opt: AdamState,
}

impl Default for RerankerParams {
    fn default() -> Self {
        Self::zeros()
    }
}

impl RerankerParams {
    pub fn zeros() -> Self {
        RerankerParams {
            w_shared: vec![0.0; FEATURE_DIM],
            bias_shared: 0.0,
            tid_deltas: BTreeMap::new(),
            mid_deltas: BTreeMap::new(),
            opt: AdamState::zero(),
        }
    }

    /// Pre-sigmoid logit for the given ids and features.
    pub fn logit(&self, ids: &AgentIds, features: &FeatureVector) -> Result<f64, RerankerError> {
        if features.dim() != FEATURE_DIM {
            return Err(RerankerError::DimensionMismatch {
                expected: FEATURE_DIM,
                got: features.dim(),
            });
        }
        let mut z = self.bias_shared;
        for (w, x) in self.w_shared.iter().zip(features.values()) {
            z += w * x;
        }
        for (map, id) in [(&self.tid_deltas, &ids.tid), (&self.mid_deltas, &ids.mid)] {
            if id == UNK_ID {
                continue;
            }
            if let Some(delta) = map.get(id) {
                z += delta.bias;
                for (w, x) in delta.w.iter().zip(features.values()) {
                    z += w * x;
                }
            }
        }
        Ok(z)
    }

    /// Relevance probability, strictly in (0, 1).
    pub fn score(&self, ids: &AgentIds, features: &FeatureVector) -> Result<f64, RerankerError> {
        Ok(sigmoid(self.logit(ids, features)?))
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<(), RerankerError> {
        let checkpoint = Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            feature_schema_version: FEATURE_SCHEMA_VERSION,
            params: self.clone(),
        };
        let file = File::create(path)?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, &checkpoint)
            .map_err(|e| RerankerError::Malformed(e.to_string()))?;
        use std::io::Write;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self, RerankerError> {
        let file = File::open(path)?;
        let checkpoint: Checkpoint = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| RerankerError::Malformed(e.to_string()))?;
        if checkpoint.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(RerankerError::FormatVersion {
                got: checkpoint.format_version,
                expected: CHECKPOINT_FORMAT_VERSION,
            });
        }
        if checkpoint.feature_schema_version != FEATURE_SCHEMA_VERSION {
            return Err(RerankerError::SchemaVersion {
                got: checkpoint.feature_schema_version,
                expected: FEATURE_SCHEMA_VERSION,
            });
        }
        Ok(checkpoint.params)
    }
}

const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    feature_schema_version: u32,
    params: RerankerParams,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// A reranked document with its relevance probability.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredDoc {
    pub passage_id: String,
    pub relevance_prob: f64,
    pub first_stage_score: f64,
    pub features: FeatureVector,
}

/// Reranks first-stage candidates to the top `k` by relevance probability.
///
/// Ties break by first-stage score descending, then passage id ascending,
/// so an untrained model reproduces the BM25 order.
pub fn rerank(
    params: &RerankerParams,
    ids: &AgentIds,
    scored: Vec<(Candidate, FeatureVector)>,
    k: usize,
) -> Result<Vec<ScoredDoc>, RerankerError> {
    assert!(k >= 1, "rerank depth must be >= 1");
    let mut docs = Vec::with_capacity(scored.len());
    for (candidate, features) in scored {
        let relevance_prob = params.score(ids, &features)?;
        docs.push(ScoredDoc {
            passage_id: candidate.passage_id,
            relevance_prob,
            first_stage_score: candidate.first_stage_score,
            features,
        });
    }
    docs.sort_by(|a, b| {
        b.relevance_prob
            .partial_cmp(&a.relevance_prob)
            .unwrap()
            .then_with(|| {
                b.first_stage_score
                    .partial_cmp(&a.first_stage_score)
                    .unwrap()
            })
            .then_with(|| a.passage_id.cmp(&b.passage_id))
    });
    docs.truncate(k);
    Ok(docs)
}
