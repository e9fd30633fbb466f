//! Inverted index and first-stage BM25 retrieval.
//!
//! The index is immutable after build; retrieval is read-only and safe to
//! call concurrently. Scoring uses Okapi BM25 with k1 = 1.2, b = 0.75 and
//! the non-negative IDF variant `ln((N - df + 0.5) / (df + 0.5) + 1)`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::corpus::Passage;

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;
/// Default first-stage retrieval depth.
pub const DEFAULT_FIRST_STAGE_N: usize = 100;

const SNAPSHOT_MAGIC: &[u8; 4] = b"USIX";
const SNAPSHOT_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("duplicate passage id: {0}")]
    DuplicatePassage(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("snapshot is truncated or corrupt: {0}")]
    Corrupt(String),
    #[error("bad snapshot magic header")]
    BadMagic,
    #[error("unsupported snapshot version {0} (expected {SNAPSHOT_VERSION})")]
    BadVersion(u8),
}

/// Lowercases and splits on non-alphanumeric boundaries. Used for both
/// indexing and queries so terms can never silently mismatch.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            current.extend(c.to_lowercase());
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// A first-stage retrieval result.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub passage_id: String,
    pub first_stage_score: f64,
}

/// Inverted index over passages. Postings are `(ordinal, term frequency)`
/// pairs sorted by ordinal.
#[derive(Debug)]
pub struct InvertedIndex {
    postings: HashMap<String, Vec<(u32, u32)>>,
    doc_lengths: Vec<u32>,
    avg_doc_length: f64,
    passage_ids: Vec<String>,
}

impl InvertedIndex {
    pub fn build<'a>(passages: impl IntoIterator<Item = &'a Passage>) -> Result<Self, IndexError> {
        let mut postings: HashMap<String, Vec<(u32, u32)>> = HashMap::new();
        let mut doc_lengths = Vec::new();
        let mut passage_ids = Vec::new();
        let mut seen: HashMap<String, ()> = HashMap::new();

        for passage in passages {
            if seen.insert(passage.passage_id.clone(), ()).is_some() {
                return Err(IndexError::DuplicatePassage(passage.passage_id.clone()));
            }
            let ordinal = passage_ids.len() as u32;
            let tokens = tokenize(&passage.index_text());
            doc_lengths.push(tokens.len() as u32);
            passage_ids.push(passage.passage_id.clone());

            let mut freqs: HashMap<String, u32> = HashMap::new();
            for t in tokens {
                *freqs.entry(t).or_insert(0) += 1;
            }
            for (term, tf) in freqs {
                postings.entry(term).or_default().push((ordinal, tf));
            }
        }
        // per-document insertion already orders each list by ordinal, but a
        // sort keeps the invariant independent of build details
        for list in postings.values_mut() {
            list.sort_unstable_by_key(|&(ord, _)| ord);
        }

        let num_docs = doc_lengths.len();
        let avg_doc_length = if num_docs == 0 {
            0.0
        } else {
            doc_lengths.iter().map(|&l| l as f64).sum::<f64>() / num_docs as f64
        };
        Ok(InvertedIndex {
            postings,
            doc_lengths,
            avg_doc_length,
            passage_ids,
        })
    }

    pub fn num_docs(&self) -> usize {
        self.doc_lengths.len()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn passage_id(&self, ordinal: u32) -> &str {
        &self.passage_ids[ordinal as usize]
    }

    fn idf(&self, df: usize) -> f64 {
        let n = self.num_docs() as f64;
        let df = df as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// Retrieves up to `n` candidates by BM25 score, descending, ties broken
    /// by passage id ascending. Only passages sharing at least one query term
    /// are returned. A query with no recognizable terms yields an empty list.
    pub fn bm25_retrieve(&self, query: &str, n: usize) -> Vec<Candidate> {
        assert!(n >= 1, "retrieval depth must be >= 1");
        let mut terms = tokenize(query);
        // dedup preserving first occurrence so accumulation order is stable
        let mut seen = HashMap::new();
        terms.retain(|t| seen.insert(t.clone(), ()).is_none());
        if terms.is_empty() || self.num_docs() == 0 {
            return Vec::new();
        }

        let mut scores: HashMap<u32, f64> = HashMap::new();
        for term in &terms {
            let Some(list) = self.postings.get(term) else {
                continue;
            };
            let idf = self.idf(list.len());
            for &(ordinal, tf) in list {
                let tf = tf as f64;
                let dl = self.doc_lengths[ordinal as usize] as f64;
                let norm = BM25_K1 * (1.0 - BM25_B + BM25_B * dl / self.avg_doc_length);
                let contrib = idf * tf * (BM25_K1 + 1.0) / (tf + norm);
                *scores.entry(ordinal).or_insert(0.0) += contrib;
            }
        }

        let mut ranked: Vec<(u32, f64)> = scores.into_iter().collect();
        ranked.sort_unstable_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap()
                .then_with(|| self.passage_id(a.0).cmp(self.passage_id(b.0)))
        });
        ranked
            .into_iter()
            .take(n)
            .map(|(ordinal, score)| Candidate {
                passage_id: self.passage_id(ordinal).to_string(),
                first_stage_score: score,
            })
            .collect()
    }

    /// Writes the index to a self-describing binary snapshot.
    pub fn save_snapshot(&self, path: impl AsRef<Path>) -> Result<(), IndexError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_all(&[SNAPSHOT_VERSION])?;
        write_u64(&mut w, self.passage_ids.len() as u64)?;
        for (id, &len) in self.passage_ids.iter().zip(&self.doc_lengths) {
            write_str(&mut w, id)?;
            write_u64(&mut w, len as u64)?;
        }
        let mut terms: Vec<&String> = self.postings.keys().collect();
        terms.sort_unstable();
        write_u64(&mut w, terms.len() as u64)?;
        for term in terms {
            write_str(&mut w, term)?;
            let list = &self.postings[term];
            write_u64(&mut w, list.len() as u64)?;
            for &(ordinal, tf) in list {
                write_u64(&mut w, ordinal as u64)?;
                write_u64(&mut w, tf as u64)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_snapshot(path: impl AsRef<Path>) -> Result<Self, IndexError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| IndexError::Corrupt("missing header".into()))?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(IndexError::BadMagic);
        }
        let mut version = [0u8; 1];
        r.read_exact(&mut version)
            .map_err(|_| IndexError::Corrupt("missing version".into()))?;
        if version[0] != SNAPSHOT_VERSION {
            return Err(IndexError::BadVersion(version[0]));
        }

        let num_docs = read_u64(&mut r)? as usize;
        let mut passage_ids = Vec::with_capacity(num_docs);
        let mut doc_lengths = Vec::with_capacity(num_docs);
        for _ in 0..num_docs {
            passage_ids.push(read_str(&mut r)?);
            doc_lengths.push(read_u64(&mut r)? as u32);
        }
        let num_terms = read_u64(&mut r)? as usize;
        let mut postings = HashMap::with_capacity(num_terms);
        for _ in 0..num_terms {
            let term = read_str(&mut r)?;
            let len = read_u64(&mut r)? as usize;
            let mut list = Vec::with_capacity(len);
            for _ in 0..len {
                let ordinal = read_u64(&mut r)? as u32;
                let tf = read_u64(&mut r)? as u32;
                if ordinal as usize >= num_docs {
                    return Err(IndexError::Corrupt(format!(
                        "posting ordinal {ordinal} out of range"
                    )));
                }
                list.push((ordinal, tf));
            }
            postings.insert(term, list);
        }
        let avg_doc_length = if num_docs == 0 {
            0.0
        } else {
            doc_lengths.iter().map(|&l| l as f64).sum::<f64>() / num_docs as f64
        };
        Ok(InvertedIndex {
            postings,
            doc_lengths,
            avg_doc_length,
            passage_ids,
        })
    }

    #[cfg(test)]
    pub(crate) fn postings_for(&self, term: &str) -> Option<&[(u32, u32)]> {
        self.postings.get(term).map(|v| v.as_slice())
    }
}

fn write_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    write_u64(w, s.len() as u64)?;
    w.write_all(s.as_bytes())
}

fn read_u64(r: &mut impl Read) -> Result<u64, IndexError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| IndexError::Corrupt("unexpected end of file".into()))?;
    Ok(u64::from_le_bytes(buf))
}

fn read_str(r: &mut impl Read) -> Result<String, IndexError> {
    let len = read_u64(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|_| IndexError::Corrupt("unexpected end of file".into()))?;
    String::from_utf8(buf).map_err(|e| IndexError::Corrupt(e.to_string()))
}
