//! Document ingestion and passage chunking.
//!
//! Raw documents are split into title-prefixed passages of at most
//! `max_words` words each. The resulting passage store is immutable and
//! safe for concurrent readers.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Lines};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: expected at least 3 tab-separated fields, found {found}")]
    MalformedLine { line: usize, found: usize },
    #[error("duplicate passage id: {0}")]
    DuplicatePassage(String),
    #[error("document has empty doc_id at line {0}")]
    EmptyDocId(usize),
}

/// One source document before chunking.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawDocument {
    pub doc_id: String,
    pub title: String,
    pub body: String,
}

/// One retrievable corpus unit: a title plus a chunk of at most
/// `max_words` body words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Passage {
    /// `{doc_id}#{ordinal}`, ordinals 0-based and contiguous per document.
    pub passage_id: String,
    pub title: String,
    pub text: String,
    /// Number of words in `text` (title words excluded).
    pub word_count: usize,
}

impl Passage {
    /// The text actually indexed and scored: title, a single space, chunk.
    pub fn index_text(&self) -> String {
        if self.title.is_empty() {
            self.text.clone()
        } else {
            format!("{} {}", self.title, self.text)
        }
    }
}

/// Splits a document body into passages of at most `max_words` words.
///
/// A word is a maximal run of non-whitespace characters. The chunks
/// partition the body's word sequence in order; the last chunk may be
/// shorter. An empty body yields no passages.
pub fn split_document(doc: &RawDocument, max_words: usize) -> Vec<Passage> {
    assert!(max_words >= 1, "max_words must be >= 1");
    let words: Vec<&str> = doc.body.split_whitespace().collect();
    words
        .chunks(max_words)
        .enumerate()
        .map(|(ordinal, chunk)| Passage {
            passage_id: format!("{}#{}", doc.doc_id, ordinal),
            title: doc.title.clone(),
            text: chunk.join(" "),
            word_count: chunk.len(),
        })
        .collect()
}

/// Streaming reader for the corpus TSV format: `id \t text \t title`,
/// one record per line, optional header line whose first field is `id`.
pub struct TsvReader {
    lines: Lines<BufReader<File>>,
    line_no: usize,
    checked_header: bool,
}

impl TsvReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let file = File::open(path)?;
        Ok(TsvReader {
            lines: BufReader::new(file).lines(),
            line_no: 0,
            checked_header: false,
        })
    }

    fn parse_line(&self, line: &str) -> Result<RawDocument, CorpusError> {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 {
            return Err(CorpusError::MalformedLine {
                line: self.line_no,
                found: fields.len(),
            });
        }
        if fields[0].is_empty() {
            return Err(CorpusError::EmptyDocId(self.line_no));
        }
        Ok(RawDocument {
            doc_id: fields[0].to_string(),
            body: fields[1].to_string(),
            title: fields[2].to_string(),
        })
    }
}

impl Iterator for TsvReader {
    type Item = Result<RawDocument, CorpusError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(e.into())),
            };
            self.line_no += 1;
            if line.is_empty() {
                continue;
            }
            if !self.checked_header {
                self.checked_header = true;
                if line.split('\t').next() == Some("id") {
                    continue;
                }
            }
            return Some(self.parse_line(&line));
        }
    }
}

/// Loads a whole corpus TSV. In strict mode the first malformed line
/// aborts the load; otherwise malformed lines are skipped.
pub fn load_tsv(path: impl AsRef<Path>, strict: bool) -> Result<Vec<RawDocument>, CorpusError> {
    let mut docs = Vec::new();
    for record in TsvReader::open(path)? {
        match record {
            Ok(doc) => docs.push(doc),
            Err(e @ CorpusError::Io(_)) => return Err(e),
            Err(e) => {
                if strict {
                    return Err(e);
                }
            }
        }
    }
    Ok(docs)
}

/// Serializes documents back to the TSV format read by [`TsvReader`].
pub fn to_tsv(docs: &[RawDocument]) -> String {
    let mut out = String::new();
    for d in docs {
        out.push_str(&d.doc_id);
        out.push('\t');
        out.push_str(&d.body);
        out.push('\t');
        out.push_str(&d.title);
        out.push('\n');
    }
    out
}

/// Immutable passage collection with stable iteration order and id lookup.
#[derive(Debug)]
pub struct PassageStore {
    passages: Vec<Passage>,
    by_id: HashMap<String, usize>,
}

impl PassageStore {
    pub fn from_documents(docs: &[RawDocument], max_words: usize) -> Result<Self, CorpusError> {
        let mut passages = Vec::new();
        let mut by_id = HashMap::new();
        for doc in docs {
            for p in split_document(doc, max_words) {
                if by_id.insert(p.passage_id.clone(), passages.len()).is_some() {
                    return Err(CorpusError::DuplicatePassage(p.passage_id));
                }
                passages.push(p);
            }
        }
        Ok(PassageStore { passages, by_id })
    }

    pub fn from_passages(passages: Vec<Passage>) -> Result<Self, CorpusError> {
        let mut by_id = HashMap::new();
        for (i, p) in passages.iter().enumerate() {
            if by_id.insert(p.passage_id.clone(), i).is_some() {
                return Err(CorpusError::DuplicatePassage(p.passage_id.clone()));
            }
        }
        Ok(PassageStore { passages, by_id })
    }

    pub fn get(&self, passage_id: &str) -> Option<&Passage> {
        self.by_id.get(passage_id).map(|&i| &self.passages[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Passage> {
        self.passages.iter()
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }
}
