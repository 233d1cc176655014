//! Corpus TF-IDF keyword extraction. Salient terms become docid components;
//! the extractor is fitted once over the corpus and is then a pure function
//! of its input text.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::Document;
use crate::text::{content_tokens, is_stopword, normalize_token};

/// Document-frequency table fitted over a corpus.
///
/// Scores candidate tokens by `tf · idf` with `idf = ln((N+1)/(df+1)) + 1`,
/// the smoothed form that never reaches zero. Ties break by first occurrence
/// in the text, so extraction is deterministic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KeywordExtractor {
    doc_freq: HashMap<String, usize>,
    n_docs: usize,
}

impl KeywordExtractor {
    /// Counts document frequencies over each document's full text (prose,
    /// flattened table segments, and gold question).
    pub fn fit(docs: &[Document]) -> Self {
        let mut doc_freq: HashMap<String, usize> = HashMap::new();
        for doc in docs {
            let mut seen: Vec<String> = content_tokens(&doc.full_text());
            seen.sort_unstable();
            seen.dedup();
            for token in seen {
                *doc_freq.entry(token).or_insert(0) += 1;
            }
        }
        KeywordExtractor {
            doc_freq,
            n_docs: docs.len(),
        }
    }

    pub fn idf(&self, token: &str) -> f64 {
        let df = self.doc_freq.get(token).copied().unwrap_or(0);
        ((self.n_docs as f64 + 1.0) / (df as f64 + 1.0)).ln() + 1.0
    }

    /// Top-`k` tokens of `text` by tf·idf. Stopwords and pure-punctuation
    /// tokens are excluded; fewer than `k` come back when the text is short.
    pub fn extract(&self, text: &str, k: usize) -> Vec<String> {
        let tokens: Vec<String> = text
            .split_whitespace()
            .map(normalize_token)
            .filter(|t| !t.is_empty() && !is_stopword(t))
            .collect();
        if tokens.is_empty() {
            return Vec::new();
        }

        // term -> (count, first occurrence index)
        let mut stats: HashMap<&str, (usize, usize)> = HashMap::new();
        for (pos, token) in tokens.iter().enumerate() {
            let entry = stats.entry(token).or_insert((0, pos));
            entry.0 += 1;
        }

        let mut ranked: Vec<(&str, f64, usize)> = stats
            .into_iter()
            .map(|(token, (tf, first))| (token, tf as f64 * self.idf(token), first))
            .collect();
        ranked.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.2.cmp(&b.2))
        });
        ranked.truncate(k);
        ranked.into_iter().map(|(t, _, _)| t.to_string()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc_with_text(raw_id: &str, text: &str) -> Document {
        Document {
            raw_id: raw_id.to_string(),
            company: "X".to_string(),
            year: "2001".to_string(),
            pre_text: vec![text.to_string()],
            post_text: vec![],
            table: vec![],
            question: None,
        }
    }

    #[test]
    fn single_candidate() {
        let docs = vec![doc_with_text("a", "derivatives derivatives derivatives")];
        let ex = KeywordExtractor::fit(&docs);
        assert_eq!(ex.extract("derivatives derivatives", 1), vec!["derivatives"]);
    }

    #[test]
    fn k_larger_than_distinct_tokens() {
        let docs = vec![doc_with_text("a", "hedge currency")];
        let ex = KeywordExtractor::fit(&docs);
        let got = ex.extract("hedge currency", 10);
        assert_eq!(got.len(), 2);
    }

    #[test]
    fn empty_after_normalization() {
        let docs = vec![doc_with_text("a", "hedge")];
        let ex = KeywordExtractor::fit(&docs);
        assert!(ex.extract("... the and |", 3).is_empty());
    }

    /// Brute-force tf·idf over a 3-doc mini corpus, computed by hand in the
    /// test body, pins the ranking.
    #[test]
    fn mini_corpus_matches_brute_force() {
        let docs = vec![
            doc_with_text("a", "hedge currency hedge"),
            doc_with_text("b", "currency swap"),
            doc_with_text("c", "revenue swap"),
        ];
        let ex = KeywordExtractor::fit(&docs);
        // query doc text: "hedge currency currency revenue"
        // df: hedge=1, currency=2, swap=2, revenue=1; N=3
        // idf(t) = ln(4/(df+1)) + 1
        let idf = |df: f64| (4.0 / (df + 1.0)).ln() + 1.0;
        let hedge = 1.0 * idf(1.0); // tf=1
        let currency = 2.0 * idf(2.0); // tf=2
        let revenue = 1.0 * idf(1.0); // tf=1
        assert!(currency > hedge);
        assert!(hedge >= revenue); // equal score; hedge occurs first
        let got = ex.extract("hedge currency currency revenue", 2);
        assert_eq!(got, vec!["currency", "hedge"]);
    }

    #[test]
    fn deterministic() {
        let docs = vec![
            doc_with_text("a", "alpha beta gamma alpha"),
            doc_with_text("b", "beta delta"),
        ];
        let ex = KeywordExtractor::fit(&docs);
        let once = ex.extract("alpha beta gamma delta", 3);
        let twice = ex.extract("alpha beta gamma delta", 3);
        assert_eq!(once, twice);
    }
}
