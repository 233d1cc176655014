//! Deterministic synthetic corpora shaped like the real input: financial
//! prose with topic terms, a header-annotated table, and a gold question.
//! Used by integration tests and desk-scale experiments.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::Document;

const COMPANIES: [&str; 40] = [
    "acme", "zenor", "baldux", "corvex", "denova", "ellux", "fintra", "gorvan",
    "helix", "invena", "jarvex", "kordel", "lumora", "maxtra", "norvel", "ovide",
    "pextra", "quorin", "ralton", "senvia", "tarvex", "umbra", "velora", "waxell",
    "xenith", "yarrow", "zelcor", "ardent", "bravex", "cindra", "dovetail", "emberly",
    "foxglove", "gantry", "hollis", "ironwood", "juniper", "keystone", "lattice", "meridian",
];

const TOPICS: [&str; 50] = [
    "hedging", "derivatives", "goodwill", "amortization", "liquidity", "dividends",
    "restructuring", "inventory", "leases", "pension", "royalties", "securities",
    "swaps", "collateral", "impairment", "depreciation", "receivables", "warranty",
    "litigation", "segments", "acquisitions", "divestiture", "backlog", "covenant",
    "guarantees", "intangibles", "maturities", "payables", "provisions", "repurchase",
    "settlements", "subsidiaries", "taxation", "translation", "underwriting", "valuation",
    "volatility", "writedowns", "yield", "arbitrage", "buyback", "custody",
    "escrow", "forfeiture", "indemnity", "novation", "offsetting", "prepayment",
    "recourse", "solvency",
];

const ROW_HEADERS: [&str; 8] = [
    "revenue", "net income", "operating expenses", "total assets",
    "cash flow", "gross margin", "interest expense", "capital expenditures",
];

/// Generates `n` documents with mostly distinct companies (some repeat
/// across years), a dedicated topic term per document, and a small table.
/// Pure function of `(n, seed)`.
pub fn corpus(n: usize, seed: u64) -> Vec<Document> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut docs = Vec::with_capacity(n);
    let mut used: std::collections::HashSet<(usize, u32)> = std::collections::HashSet::new();

    for i in 0..n {
        let (company_idx, year) = loop {
            let c = rng.gen_range(0..COMPANIES.len());
            let y = rng.gen_range(1998u32..=2020);
            if used.insert((c, y)) {
                break (c, y);
            }
        };
        let company = COMPANIES[company_idx];
        let topic = TOPICS[i % TOPICS.len()];
        let second_topic = TOPICS[(i + 17) % TOPICS.len()];
        let page = rng.gen_range(10..99);

        let n_rows = rng.gen_range(3..=4);
        let mut headers: Vec<&str> = ROW_HEADERS.to_vec();
        headers.shuffle(&mut rng);
        let mut table: Vec<Vec<String>> = Vec::with_capacity(n_rows);
        table.push(vec![
            String::new(),
            year.to_string(),
            (year - 1).to_string(),
        ]);
        for row_header in headers.iter().take(n_rows - 1) {
            table.push(vec![
                row_header.to_string(),
                rng.gen_range(50..999).to_string(),
                rng.gen_range(50..999).to_string(),
            ]);
        }

        let pre_text = vec![
            format!("{company} reported {topic} activity during {year} ."),
            format!("the {topic} program at {company} also covers {second_topic} exposure ."),
        ];
        let post_text = vec![format!(
            "see the {topic} note for details on {second_topic} ."
        )];
        let question = format!(
            "what was the {} for {company} {topic} in {year}?",
            table[1][0]
        );

        docs.push(Document {
            raw_id: format!("{}/{year}/page_{page}.pdf-{i}", company.to_uppercase()),
            company: company.to_uppercase(),
            year: year.to_string(),
            pre_text,
            post_text,
            table,
            question: Some(question),
        });
    }
    docs
}

/// Serializes documents in the ingest schema, so synthetic corpora exercise
/// the real file path.
pub fn to_ingest_json(docs: &[Document]) -> String {
    let elements: Vec<serde_json::Value> = docs
        .iter()
        .map(|d| {
            serde_json::json!({
                "id": d.raw_id,
                "pre_text": d.pre_text,
                "post_text": d.post_text,
                "table": d.table,
                "qa": d.question.as_ref().map(|q| serde_json::json!({"question": q})),
            })
        })
        .collect();
    serde_json::to_string_pretty(&elements).expect("documents serialize")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_registry, ingest_corpus};
    use std::io::Write;

    #[test]
    fn deterministic_and_unique() {
        let a = corpus(50, 7);
        let b = corpus(50, 7);
        assert_eq!(a, b);
        let ids: std::collections::HashSet<&str> =
            a.iter().map(|d| d.raw_id.as_str()).collect();
        assert_eq!(ids.len(), 50);
    }

    #[test]
    fn registry_builds_over_synthetic_corpus() {
        let docs = corpus(50, 7);
        let reg = build_registry(&docs, 3).unwrap();
        assert_eq!(reg.len(), 50);
    }

    #[test]
    fn roundtrips_through_ingest() {
        let docs = corpus(10, 3);
        let json = to_ingest_json(&docs);
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(json.as_bytes()).unwrap();
        let got = ingest_corpus(f.path()).unwrap();
        assert!(got.warnings.is_empty());
        assert_eq!(got.documents, docs);
    }
}
