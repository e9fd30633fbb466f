//! Two-stage retrieval: BM25 candidates, then the trainable reranker.

use std::path::Path;

use thiserror::Error;

use crate::corpus::{load_tsv, CorpusError, Passage, PassageStore};
use crate::index::{Candidate, IndexError, InvertedIndex, DEFAULT_FIRST_STAGE_N};
use crate::reranker::{
    extract_features, rerank, AgentIds, FeatureVector, RerankerError, RerankerParams, ScoredDoc,
};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Reranker(#[from] RerankerError),
}

/// Immutable corpus + index pair shared by all sessions.
pub struct SearchEngine {
    store: PassageStore,
    index: InvertedIndex,
}

impl SearchEngine {
    pub fn new(store: PassageStore) -> Result<Self, EngineError> {
        let index = InvertedIndex::build(store.iter())?;
        Ok(SearchEngine { store, index })
    }

    /// Loads a corpus TSV (strict), chunks it, and builds the index.
    pub fn open(corpus_path: impl AsRef<Path>, max_words: usize) -> Result<Self, EngineError> {
        let docs = load_tsv(corpus_path, true)?;
        let store = PassageStore::from_documents(&docs, max_words)?;
        Self::new(store)
    }

    pub fn store(&self) -> &PassageStore {
        &self.store
    }

    pub fn index(&self) -> &InvertedIndex {
        &self.index
    }

    pub fn passage(&self, passage_id: &str) -> Option<&Passage> {
        self.store.get(passage_id)
    }

    /// First-stage candidates with reranker features attached.
    pub fn candidates(&self, query: &str, n: usize) -> Vec<(Candidate, FeatureVector)> {
        self.index
            .bm25_retrieve(query, n)
            .into_iter()
            .map(|c| {
                let passage = self
                    .store
                    .get(&c.passage_id)
                    .expect("index and store are built from the same passages");
                let features = extract_features(query, passage, c.first_stage_score);
                (c, features)
            })
            .collect()
    }

    /// Full two-stage retrieval: BM25 top `n`, reranked to top `k` with the
    /// given parameters and agent identity.
    pub fn retrieve(
        &self,
        params: &RerankerParams,
        ids: &AgentIds,
        query: &str,
        n: usize,
        k: usize,
    ) -> Result<Vec<ScoredDoc>, EngineError> {
        Ok(rerank(params, ids, self.candidates(query, n), k)?)
    }

    pub fn default_first_stage_n(&self) -> usize {
        DEFAULT_FIRST_STAGE_N
    }
}
