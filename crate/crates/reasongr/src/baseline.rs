//! Okapi BM25 over document text (prose plus flattened table segments), the
//! sparse retrieval baseline. Tokens share the corpus normalizer so both
//! retrievers consume identical evidence.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{flatten_table, Document};
use crate::error::{Error, Result};
use crate::text::tokenize;

pub const DEFAULT_K1: f64 = 1.5;
pub const DEFAULT_B: f64 = 0.75;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InvertedIndex {
    /// term -> (doc index, term frequency), sorted by doc index.
    postings: HashMap<String, Vec<(u32, u32)>>,
    doc_lengths: Vec<u32>,
    avgdl: f64,
    raw_ids: Vec<String>,
    pub k1: f64,
    pub b: f64,
}

/// Tokens BM25 sees for one document. Stopwords stay in; the idf term
/// downweights them.
pub fn document_tokens(doc: &Document) -> Vec<String> {
    let mut text: Vec<String> = doc.sentences().map(str::to_string).collect();
    text.extend(flatten_table(doc).into_iter().map(|s| s.text));
    tokenize(&text.join(" "))
}

pub fn build_index(docs: &[Document]) -> Result<InvertedIndex> {
    if docs.is_empty() {
        return Err(Error::Invalid("cannot index zero documents".into()));
    }
    let mut postings: HashMap<String, Vec<(u32, u32)>> = HashMap::new();
    let mut doc_lengths = Vec::with_capacity(docs.len());
    let mut raw_ids = Vec::with_capacity(docs.len());

    for (idx, doc) in docs.iter().enumerate() {
        let tokens = document_tokens(doc);
        doc_lengths.push(tokens.len() as u32);
        raw_ids.push(doc.raw_id.clone());
        let mut counts: HashMap<String, u32> = HashMap::new();
        for t in tokens {
            *counts.entry(t).or_insert(0) += 1;
        }
        for (term, tf) in counts {
            postings.entry(term).or_default().push((idx as u32, tf));
        }
    }
    for list in postings.values_mut() {
        list.sort_unstable_by_key(|&(doc, _)| doc);
    }
    let avgdl = doc_lengths.iter().map(|&l| l as f64).sum::<f64>() / docs.len() as f64;

    Ok(InvertedIndex {
        postings,
        doc_lengths,
        avgdl,
        raw_ids,
        k1: DEFAULT_K1,
        b: DEFAULT_B,
    })
}

impl InvertedIndex {
    pub fn n_docs(&self) -> usize {
        self.doc_lengths.len()
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn raw_id(&self, doc: usize) -> &str {
        &self.raw_ids[doc]
    }

    pub fn doc_frequency(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    fn term_frequency(&self, term: &str, doc: u32) -> u32 {
        self.postings
            .get(term)
            .and_then(|list| {
                list.binary_search_by_key(&doc, |&(d, _)| d)
                    .ok()
                    .map(|i| list[i].1)
            })
            .unwrap_or(0)
    }

    /// +1-smoothed idf, nonnegative for every document frequency.
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.n_docs() as f64;
        let df = self.doc_frequency(term) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// Okapi score of one document for the query token multiset:
    /// `Σ_t idf(t) · tf·(k1+1) / (tf + k1·(1−b+b·len/avgdl))`.
    pub fn score(&self, query_tokens: &[String], doc: usize) -> f64 {
        let len_norm = 1.0 - self.b + self.b * self.doc_lengths[doc] as f64 / self.avgdl;
        let mut total = 0.0;
        for term in query_tokens {
            let tf = self.term_frequency(term, doc as u32) as f64;
            if tf == 0.0 {
                continue;
            }
            total += self.idf(term) * tf * (self.k1 + 1.0) / (tf + self.k1 * len_norm);
        }
        total
    }

    /// Best-scoring document's raw id; ties break toward the lowest index.
    pub fn retrieve_top1(&self, query: &str) -> &str {
        let tokens = tokenize(query);
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for doc in 0..self.n_docs() {
            let s = self.score(&tokens, doc);
            if s > best_score {
                best = doc;
                best_score = s;
            }
        }
        &self.raw_ids[best]
    }
}
