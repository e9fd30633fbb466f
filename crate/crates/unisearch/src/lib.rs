//! A unified search engine for retrieval-augmented agents.
//!
//! BM25 first-stage retrieval plus a trainable, agent-conditioned reranker
//! that learns from per-document binary feedback, offline (iterative
//! retrain-and-recollect) and online (per-agent updates during serving).

pub mod agents;
pub mod benchmark;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod engine;
pub mod eval;
pub mod index;
pub mod reranker;
pub mod serve;
pub mod training;
