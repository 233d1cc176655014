//! Word-level vocabulary and encoding. Docid components are atomic tokens so
//! the decoding trie stays tiny and constrained decoding is exact.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::corpus::{DocIdRegistry, Document};
use crate::error::{Error, Result};
use crate::text::normalize_token;

pub type TokenId = u32;
pub type TokenSequence = Vec<TokenId>;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
/// The ` => ` marker between reasoning trace and docid.
pub const SEP: TokenId = 4;

const SPECIAL_TOKENS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", "=>"];

/// Immutable token table. Ids are dense `0..len`, specials first, everything
/// else in first-occurrence order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    token_to_id: IndexMap<String, TokenId>,
    tokens: Vec<String>,
}

enum Piece {
    Sep,
    Word(String),
}

/// Splits text into lookup units: whitespace words, with `=>` mapped to the
/// separator and hyphenated words split into their components.
fn pieces(text: &str) -> Vec<Piece> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        if word == "=>" {
            out.push(Piece::Sep);
            continue;
        }
        if word.contains('-') {
            for part in word.split('-') {
                let norm = normalize_token(part);
                if !norm.is_empty() {
                    out.push(Piece::Word(norm));
                }
            }
        } else {
            let norm = normalize_token(word);
            if !norm.is_empty() {
                out.push(Piece::Word(norm));
            }
        }
    }
    out
}

impl Vocab {
    fn with_specials() -> Self {
        let mut v = Vocab {
            token_to_id: IndexMap::new(),
            tokens: Vec::new(),
        };
        for s in SPECIAL_TOKENS {
            v.intern(s);
        }
        v
    }

    fn intern(&mut self, token: &str) -> TokenId {
        if let Some(&id) = self.token_to_id.get(token) {
            return id;
        }
        let id = self.tokens.len() as TokenId;
        self.tokens.push(token.to_string());
        self.token_to_id.insert(token.to_string(), id);
        id
    }

    fn intern_text(&mut self, text: &str) {
        for piece in pieces(text) {
            if let Piece::Word(w) = piece {
                self.intern(&w);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // specials are always present
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// JSON list of tokens; a token's id is its index.
    pub fn export_json(&self) -> String {
        serde_json::to_string_pretty(&self.tokens).expect("token list serializes")
    }

    pub fn import_json(json: &str) -> Result<Self> {
        let tokens: Vec<String> =
            serde_json::from_str(json).map_err(|e| Error::Config(format!("vocab import: {e}")))?;
        if tokens.len() < SPECIAL_TOKENS.len()
            || tokens[..SPECIAL_TOKENS.len()] != SPECIAL_TOKENS[..]
        {
            return Err(Error::Config(
                "vocab import: special tokens missing or reordered".into(),
            ));
        }
        let mut token_to_id = IndexMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if token_to_id.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Config(format!("vocab import: duplicate token `{t}`")));
            }
        }
        Ok(Vocab { token_to_id, tokens })
    }
}

/// Builds the vocabulary over the registry's docid components (atomic, in
/// registry order), every document's text, and the given prompt scaffolding
/// strings. Id assignment is first occurrence, so identical inputs always
/// produce identical tables.
pub fn build_vocab(docs: &[Document], registry: &DocIdRegistry, prompt_texts: &[&str]) -> Vocab {
    let mut vocab = Vocab::with_specials();
    for (_, docid) in registry.entries() {
        for comp in &docid.components {
            vocab.intern(comp);
        }
    }
    for doc in docs {
        vocab.intern_text(&doc.full_text());
    }
    for text in prompt_texts {
        vocab.intern_text(text);
    }
    vocab
}

/// Word-level encoding; out-of-vocabulary words map to `UNK`. `BOS`/`EOS`
/// are the caller's responsibility.
pub fn encode(text: &str, vocab: &Vocab) -> TokenSequence {
    pieces(text)
        .into_iter()
        .map(|p| match p {
            Piece::Sep => SEP,
            Piece::Word(w) => vocab.id(&w).unwrap_or(UNK),
        })
        .collect()
}

/// Token strings for a sequence, skipping pad/bos/eos.
pub fn tokens<'v>(seq: &[TokenId], vocab: &'v Vocab) -> Vec<&'v str> {
    seq.iter()
        .filter(|&&id| id != PAD && id != BOS && id != EOS)
        .filter_map(|&id| vocab.token(id))
        .collect()
}

/// Space-joined decoding of a sequence.
pub fn decode(seq: &[TokenId], vocab: &Vocab) -> String {
    tokens(seq, vocab).join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_registry, Document};

    fn docs_with_keywords() -> Vec<Document> {
        vec![
            Document {
                raw_id: "ADI/2009/p.pdf".into(),
                company: "ADI".into(),
                year: "2009".into(),
                pre_text: vec!["the hedge program covers currency risk".into()],
                post_text: vec![],
                table: vec![],
                question: None,
            },
            Document {
                raw_id: "IBM/2010/p.pdf".into(),
                company: "IBM".into(),
                year: "2010".into(),
                pre_text: vec!["services revenue grew strongly".into()],
                post_text: vec![],
                table: vec![],
                question: None,
            },
        ]
    }

    #[test]
    fn specials_occupy_first_five_ids() {
        let docs = docs_with_keywords();
        let reg = build_registry(&docs, 2).unwrap();
        let v = build_vocab(&docs, &reg, &[]);
        assert_eq!(v.token(PAD), Some("<pad>"));
        assert_eq!(v.token(BOS), Some("<bos>"));
        assert_eq!(v.token(EOS), Some("<eos>"));
        assert_eq!(v.token(UNK), Some("<unk>"));
        assert_eq!(v.token(SEP), Some("=>"));
    }

    #[test]
    fn docid_components_are_tokens() {
        let docs = docs_with_keywords();
        let reg = build_registry(&docs, 2).unwrap();
        let v = build_vocab(&docs, &reg, &[]);
        for (_, id) in reg.entries() {
            for comp in &id.components {
                assert!(v.id(comp).is_some(), "component `{comp}` missing");
            }
        }
    }

    #[test]
    fn vocab_size_specials_plus_components() {
        // single doc with no text: vocabulary is specials + docid components
        let doc = Document {
            raw_id: "A/2001/p.pdf".into(),
            company: "A".into(),
            year: "2001".into(),
            pre_text: vec![],
            post_text: vec![],
            table: vec![],
            question: None,
        };
        let reg = build_registry(std::slice::from_ref(&doc), 3).unwrap();
        let v = build_vocab(&[doc], &reg, &[]);
        assert_eq!(v.len(), 5 + 2); // "a" and "2001"
    }

    #[test]
    fn deterministic_assignment() {
        let docs = docs_with_keywords();
        let reg = build_registry(&docs, 2).unwrap();
        let a = build_vocab(&docs, &reg, &["Query: Document ID:"]);
        let b = build_vocab(&docs, &reg, &["Query: Document ID:"]);
        assert_eq!(a.tokens, b.tokens);
    }

    #[test]
    fn surface_encodes_to_component_ids() {
        let docs = docs_with_keywords();
        let reg = build_registry(&docs, 2).unwrap();
        let v = build_vocab(&docs, &reg, &[]);
        let surface = &reg.entries().next().unwrap().1.surface.clone();
        let ids = encode(surface, &v);
        let expected: Vec<TokenId> = surface.split('-').map(|c| v.id(c).unwrap()).collect();
        assert_eq!(ids, expected);
    }

    #[test]
    fn empty_and_oov() {
        let docs = docs_with_keywords();
        let reg = build_registry(&docs, 2).unwrap();
        let v = build_vocab(&docs, &reg, &[]);
        assert!(encode("", &v).is_empty());
        assert_eq!(encode("zzzunknownzzz", &v), vec![UNK]);
    }

    #[test]
    fn docid_roundtrip_and_injectivity() {
        let docs = docs_with_keywords();
        let reg = build_registry(&docs, 2).unwrap();
        let v = build_vocab(&docs, &reg, &[]);
        let mut seen = std::collections::HashSet::new();
        for (_, id) in reg.entries() {
            let ids = encode(&id.surface, &v);
            assert_eq!(tokens(&ids, &v).join("-"), id.surface);
            assert!(seen.insert(ids), "docids must encode injectively");
        }
    }

    #[test]
    fn separator_roundtrip() {
        let docs = docs_with_keywords();
        let reg = build_registry(&docs, 2).unwrap();
        let v = build_vocab(&docs, &reg, &[]);
        let ids = encode("step one => adi-2009", &v);
        assert!(ids.contains(&SEP));
        let text = decode(&ids, &v);
        assert!(text.contains("=>"));
    }

    #[test]
    fn export_import_roundtrip() {
        let docs = docs_with_keywords();
        let reg = build_registry(&docs, 2).unwrap();
        let v = build_vocab(&docs, &reg, &[]);
        let imported = Vocab::import_json(&v.export_json()).unwrap();
        assert_eq!(imported.tokens, v.tokens);
    }
}
