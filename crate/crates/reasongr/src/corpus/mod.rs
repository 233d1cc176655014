//! Corpus ingestion, table flattening, docid construction, and the docid
//! registry with its prefix trie.
//!
//! A docid is the document's normalized company and year followed by
//! TF-IDF keywords, joined by hyphens: `adi-2009-hedge-currency`. The raw
//! source filename stays the registry key; the keyword surface is what the
//! model generates.

mod ingest;
mod keywords;
mod trie;

pub use ingest::{ingest_corpus, CorpusIngest};
pub use keywords::KeywordExtractor;
pub use trie::ComponentTrie;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::normalize_token;

/// One financial-report excerpt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    /// Source filename, e.g. `ADI/2009/page_49.pdf-2`. Unique per corpus.
    pub raw_id: String,
    pub company: String,
    /// Four digits for conforming ids, `0000` for the fallback.
    pub year: String,
    pub pre_text: Vec<String>,
    pub post_text: Vec<String>,
    /// Row 0 holds column headers; column 0 of each row holds row headers.
    pub table: Vec<Vec<String>>,
    /// Gold question attached to the excerpt, when the source provides one.
    pub question: Option<String>,
}

impl Document {
    /// All prose sentences, pre then post.
    pub fn sentences(&self) -> impl Iterator<Item = &str> {
        self.pre_text
            .iter()
            .chain(self.post_text.iter())
            .map(String::as_str)
    }

    /// Text evidence for indexing and retrieval: prose plus flattened table
    /// segments plus the gold question.
    pub fn full_text(&self) -> String {
        let mut parts: Vec<String> = self.sentences().map(str::to_string).collect();
        parts.extend(flatten_table(self).into_iter().map(|s| s.text));
        if let Some(q) = &self.question {
            parts.push(q.clone());
        }
        parts.join(" ")
    }
}

/// `<row header> | <column header> | <cell value>` for one interior cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSegment {
    pub text: String,
    pub parent_raw_id: String,
}

/// One segment per nonempty interior cell (row ≥ 1, column ≥ 1), row-major.
/// Tables with fewer than 2 rows or columns have no interior cells and yield
/// an empty list.
pub fn flatten_table(doc: &Document) -> Vec<TableSegment> {
    let mut segments = Vec::new();
    let Some(header) = doc.table.first() else {
        return segments;
    };
    for row in doc.table.iter().skip(1) {
        let Some(row_header) = row.first() else {
            continue;
        };
        for (c, cell) in row.iter().enumerate().skip(1) {
            if c >= header.len() || cell.trim().is_empty() {
                continue;
            }
            segments.push(TableSegment {
                text: format!("{row_header} | {} | {cell}", header[c]),
                parent_raw_id: doc.raw_id.clone(),
            });
        }
    }
    segments
}

/// Ordered docid components and their hyphen-joined surface.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocId {
    pub components: Vec<String>,
    pub surface: String,
}

impl DocId {
    fn from_components(components: Vec<String>) -> Self {
        let surface = components.join("-");
        DocId { components, surface }
    }
}

/// Builds the docid for one document: `[company, year] ++ keywords`, with
/// ordinal suffixes `2`, `3`, … appended until the surface avoids `taken`.
///
/// Keywords must already be normalized (lowercase, no hyphens or whitespace).
pub fn build_docid(
    doc: &Document,
    keywords: &[String],
    taken: &std::collections::HashSet<String>,
) -> Result<DocId> {
    let company = normalize_token(&doc.company);
    let year = normalize_token(&doc.year);
    if company.is_empty() || year.is_empty() {
        return Err(Error::DocId(format!(
            "document `{}`: company or year empty after normalization",
            doc.raw_id
        )));
    }
    let mut components = Vec::with_capacity(2 + keywords.len());
    components.push(company);
    components.push(year);
    components.extend(keywords.iter().cloned());

    let mut candidate = DocId::from_components(components);
    let mut ordinal = 2u64;
    while taken.contains(&candidate.surface) {
        let mut components = candidate.components.clone();
        if ordinal > 2 {
            components.pop();
        }
        components.push(ordinal.to_string());
        candidate = DocId::from_components(components);
        ordinal += 1;
    }
    Ok(candidate)
}

/// Bidirectional raw_id ↔ docid map plus the component trie used for
/// constrained decoding. Immutable once built; safe to share across readers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DocIdRegistry {
    by_raw_id: IndexMap<String, DocId>,
    by_surface: IndexMap<String, String>,
    trie: ComponentTrie,
}

impl DocIdRegistry {
    pub fn len(&self) -> usize {
        self.by_raw_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_raw_id.is_empty()
    }

    pub fn docid_for(&self, raw_id: &str) -> Option<&DocId> {
        self.by_raw_id.get(raw_id)
    }

    pub fn raw_id_for(&self, surface: &str) -> Option<&str> {
        self.by_surface.get(surface).map(String::as_str)
    }

    /// Registered entries in insertion (corpus) order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &DocId)> {
        self.by_raw_id.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trie(&self) -> &ComponentTrie {
        &self.trie
    }

    /// JSON map `{surface → raw_id}` for inspection.
    pub fn export_json(&self) -> String {
        serde_json::to_string_pretty(&self.by_surface).expect("registry map serializes")
    }
}

/// Builds the registry over `docs` in input order: extracts `k` keywords per
/// document from its own text, constructs docids with collision suffixes,
/// and inserts every component sequence into the trie.
pub fn build_registry(docs: &[Document], k: usize) -> Result<DocIdRegistry> {
    if docs.is_empty() {
        return Err(Error::Invalid("cannot build a registry from zero documents".into()));
    }
    let extractor = KeywordExtractor::fit(docs);
    let mut by_raw_id = IndexMap::new();
    let mut by_surface = IndexMap::new();
    let mut taken = std::collections::HashSet::new();
    let mut trie = ComponentTrie::new();

    for doc in docs {
        let keywords = extractor.extract(&doc.full_text(), k);
        let docid = build_docid(doc, &keywords, &taken)?;
        if by_raw_id.contains_key(&doc.raw_id) {
            return Err(Error::Duplicate {
                what: "raw_id".into(),
                value: doc.raw_id.clone(),
            });
        }
        taken.insert(docid.surface.clone());
        trie.insert(&docid.components);
        by_surface.insert(docid.surface.clone(), doc.raw_id.clone());
        by_raw_id.insert(doc.raw_id.clone(), docid);
    }

    Ok(DocIdRegistry {
        by_raw_id,
        by_surface,
        trie,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    pub(crate) fn doc(raw_id: &str, company: &str, year: &str) -> Document {
        Document {
            raw_id: raw_id.to_string(),
            company: company.to_string(),
            year: year.to_string(),
            pre_text: vec![],
            post_text: vec![],
            table: vec![],
            question: None,
        }
    }

    #[test]
    fn flatten_two_by_three() {
        let mut d = doc("x", "X", "2001");
        d.table = vec![
            vec!["".into(), "2019".into(), "2018".into()],
            vec!["revenue".into(), "100".into(), "90".into()],
        ];
        let segs = flatten_table(&d);
        let texts: Vec<&str> = segs.iter().map(|s| s.text.as_str()).collect();
        assert_eq!(texts, vec!["revenue | 2019 | 100", "revenue | 2018 | 90"]);
    }

    #[test]
    fn flatten_no_interior_cells() {
        let mut d = doc("x", "X", "2001");
        d.table = vec![vec!["h".into()]];
        assert!(flatten_table(&d).is_empty());
        d.table = vec![];
        assert!(flatten_table(&d).is_empty());
    }

    #[test]
    fn flatten_three_by_three_count() {
        let mut d = doc("x", "X", "2001");
        d.table = vec![
            vec!["".into(), "a".into(), "b".into()],
            vec!["r1".into(), "1".into(), "2".into()],
            vec!["r2".into(), "3".into(), "4".into()],
        ];
        assert_eq!(flatten_table(&d).len(), 4);
    }

    #[test]
    fn docid_join_rule() {
        let d = doc("ADI/2009/page_49.pdf-2", "ADI", "2009");
        let kws = vec!["hedge".to_string(), "currency".to_string()];
        let id = build_docid(&d, &kws, &HashSet::new()).unwrap();
        assert_eq!(id.surface, "adi-2009-hedge-currency");
        assert_eq!(id.components, vec!["adi", "2009", "hedge", "currency"]);
    }

    #[test]
    fn docid_collision_suffix() {
        let d = doc("ADI/2009/p.pdf", "ADI", "2009");
        let kws = vec!["hedge".to_string(), "currency".to_string()];
        let mut taken = HashSet::new();
        taken.insert("adi-2009-hedge-currency".to_string());
        let id = build_docid(&d, &kws, &taken).unwrap();
        assert_eq!(id.surface, "adi-2009-hedge-currency-2");
        taken.insert(id.surface);
        let id3 = build_docid(&d, &kws, &taken).unwrap();
        assert_eq!(id3.surface, "adi-2009-hedge-currency-3");
    }

    #[test]
    fn docid_prefix_only_for_empty_keywords() {
        let d = doc("ADI/2009/p.pdf", "ADI", "2009");
        let id = build_docid(&d, &[], &HashSet::new()).unwrap();
        assert_eq!(id.surface, "adi-2009");
    }

    #[test]
    fn docid_rejects_empty_company() {
        let d = doc("x", "$$$", "2009");
        assert!(build_docid(&d, &[], &HashSet::new()).is_err());
    }

    #[test]
    fn surface_roundtrips_through_split() {
        let d = doc("ADI/2009/p.pdf", "ADI", "2009");
        let kws = vec!["hedge".to_string()];
        let id = build_docid(&d, &kws, &HashSet::new()).unwrap();
        let split: Vec<&str> = id.surface.split('-').collect();
        assert_eq!(split, id.components);
    }

    #[test]
    fn registry_bijective_and_trie_matches() {
        let mut docs = Vec::new();
        for i in 0..50 {
            let mut d = doc(
                &format!("C{i}/20{:02}/p.pdf", i % 30),
                &format!("C{i}"),
                &format!("20{:02}", i % 30),
            );
            d.pre_text = vec![format!("term{i} appears with value {}", i * 7)];
            docs.push(d);
        }
        let reg = build_registry(&docs, 2).unwrap();
        assert_eq!(reg.len(), 50);

        let mut surfaces = HashSet::new();
        for (raw, id) in reg.entries() {
            assert!(surfaces.insert(id.surface.clone()), "duplicate surface");
            assert_eq!(reg.raw_id_for(&id.surface), Some(raw));
            assert_eq!(reg.docid_for(raw).unwrap().surface, id.surface);
        }

        // trie paths == registered component sequences, both directions
        let paths: HashSet<Vec<String>> = reg.trie().terminal_paths().into_iter().collect();
        let registered: HashSet<Vec<String>> =
            reg.entries().map(|(_, id)| id.components.clone()).collect();
        assert_eq!(paths, registered);
    }

    #[test]
    fn registry_rejects_duplicate_raw_id() {
        let d1 = doc("X/2001/p.pdf", "X", "2001");
        let d2 = doc("X/2001/p.pdf", "X", "2001");
        let err = build_registry(&[d1, d2], 1).unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn trie_shares_prefixes() {
        let mut t = ComponentTrie::new();
        t.insert(&["a".into(), "b".into(), "c".into()]);
        t.insert(&["a".into(), "b".into(), "d".into()]);
        let node = t.descend(t.root(), "a").and_then(|n| t.descend(n, "b")).unwrap();
        assert_eq!(t.children(node).count(), 2);
    }

    proptest! {
        #[test]
        fn flatten_count_law(rows in 2usize..8, cols in 2usize..8) {
            let mut d = doc("x", "X", "2001");
            d.table = (0..rows)
                .map(|r| (0..cols).map(|c| format!("v{r}x{c}")).collect())
                .collect();
            prop_assert_eq!(flatten_table(&d).len(), (rows - 1) * (cols - 1));
        }
    }
}
