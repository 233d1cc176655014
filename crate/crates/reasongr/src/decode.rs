//! Trie-constrained decoding. At every step the next token is restricted to
//! children of the current trie node (plus EOS at terminals), so any decoded
//! docid is registered by construction. Includes greedy, beam, two-phase
//! chain-of-thought decoding, and an unconstrained ablation path.

use std::collections::BTreeMap;

use crate::corpus::{DocId, DocIdRegistry};
use crate::error::{Error, Result};
use crate::model::{AdapterSet, SeqModel};
use crate::tokenizer::{decode as decode_text, TokenId, Vocab, BOS, EOS, PAD, SEP, UNK};

/// Next-token logits provider. Decoding is pure given a scorer, so model
/// snapshots and synthetic scorers plug in interchangeably.
pub trait TokenScorer {
    fn vocab_size(&self) -> usize;
    fn next_logits(&mut self, src: &[TokenId], prefix: &[TokenId]) -> Result<Vec<f64>>;
}

/// Scorer backed by a model snapshot; the encoder memory is computed once
/// per source sequence and reused across decoding steps.
pub struct ModelScorer<'a> {
    model: &'a SeqModel,
    adapters: &'a AdapterSet,
    cached: Option<(Vec<TokenId>, ndarray::Array2<f64>)>,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a SeqModel, adapters: &'a AdapterSet) -> Self {
        ModelScorer {
            model,
            adapters,
            cached: None,
        }
    }
}

impl TokenScorer for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.dims.vocab_size
    }

    fn next_logits(&mut self, src: &[TokenId], prefix: &[TokenId]) -> Result<Vec<f64>> {
        let fresh = match &self.cached {
            Some((cached_src, _)) => cached_src != src,
            None => true,
        };
        if fresh {
            let memory = self.model.encode_memory(self.adapters, src)?;
            self.cached = Some((src.to_vec(), memory));
        }
        let (_, memory) = self.cached.as_ref().expect("memory cached");
        self.model.next_logits(self.adapters, memory, prefix)
    }
}

/// Docid trie over token ids; each docid component is one vocabulary token.
#[derive(Debug, Clone)]
pub struct TokenTrie {
    nodes: Vec<TokenNode>,
}

#[derive(Debug, Clone, Default)]
struct TokenNode {
    children: BTreeMap<TokenId, usize>,
    terminal: bool,
}

impl TokenTrie {
    pub fn from_registry(registry: &DocIdRegistry, vocab: &Vocab) -> Result<Self> {
        let mut nodes = vec![TokenNode::default()];
        for (_, docid) in registry.entries() {
            let mut node = 0usize;
            for comp in &docid.components {
                let id = vocab.id(comp).ok_or_else(|| {
                    Error::Invalid(format!("docid component `{comp}` missing from vocabulary"))
                })?;
                node = match nodes[node].children.get(&id) {
                    Some(&next) => next,
                    None => {
                        let next = nodes.len();
                        nodes.push(TokenNode::default());
                        nodes[node].children.insert(id, next);
                        next
                    }
                };
            }
            nodes[node].terminal = true;
        }
        if nodes.len() == 1 {
            return Err(Error::Invalid("token trie is empty".into()));
        }
        Ok(TokenTrie { nodes })
    }

    fn root(&self) -> usize {
        0
    }

    fn is_terminal(&self, node: usize) -> bool {
        self.nodes[node].terminal
    }

    fn children(&self, node: usize) -> &BTreeMap<TokenId, usize> {
        &self.nodes[node].children
    }

    /// Every root-to-terminal token path, for exhaustive oracles.
    pub fn all_paths(&self) -> Vec<Vec<TokenId>> {
        let mut paths = Vec::new();
        let mut stack = vec![(self.root(), Vec::new())];
        while let Some((node, path)) = stack.pop() {
            if self.is_terminal(node) {
                paths.push(path.clone());
            }
            for (&tok, &child) in self.nodes[node].children.iter().rev() {
                let mut next = path.clone();
                next.push(tok);
                stack.push((child, next));
            }
        }
        paths
    }
}

fn lookup_docid(
    tokens: &[TokenId],
    registry: &DocIdRegistry,
    vocab: &Vocab,
) -> Result<DocId> {
    let comps: Vec<&str> = tokens
        .iter()
        .map(|&id| {
            vocab
                .token(id)
                .ok_or_else(|| Error::Invalid(format!("token id {id} outside vocabulary")))
        })
        .collect::<Result<_>>()?;
    let surface = comps.join("-");
    let raw = registry
        .raw_id_for(&surface)
        .ok_or_else(|| Error::Invalid(format!("decoded surface `{surface}` not registered")))?;
    Ok(registry
        .docid_for(raw)
        .expect("registry is bidirectional")
        .clone())
}

/// Argmax over the allowed token set, ties toward the lowest id.
fn argmax_allowed(logits: &[f64], allowed: impl Iterator<Item = TokenId>) -> Option<TokenId> {
    let mut best: Option<(TokenId, f64)> = None;
    for tok in allowed {
        let v = logits[tok as usize];
        match best {
            Some((_, bv)) if v <= bv => {}
            _ => best = Some((tok, v)),
        }
    }
    best.map(|(t, _)| t)
}

/// Walks the remaining trie greedily under `logits` (the most recent step's
/// scores) until a terminal node; used when the token budget runs out.
fn complete_to_terminal(trie: &TokenTrie, mut node: usize, logits: &[f64], out: &mut Vec<TokenId>) {
    while !trie.is_terminal(node) {
        let (&tok, &child) = trie
            .children(node)
            .iter()
            .max_by(|(a_tok, _), (b_tok, _)| {
                logits[**a_tok as usize]
                    .partial_cmp(&logits[**b_tok as usize])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(b_tok.cmp(a_tok)) // ties toward the lowest id
            })
            .expect("trie paths always reach a terminal");
        out.push(tok);
        node = child;
    }
}

fn greedy_from_prefix(
    scorer: &mut dyn TokenScorer,
    src: &[TokenId],
    start_prefix: &[TokenId],
    trie: &TokenTrie,
    registry: &DocIdRegistry,
    vocab: &Vocab,
    max_len: usize,
) -> Result<DocId> {
    let mut prefix = start_prefix.to_vec();
    let mut emitted: Vec<TokenId> = Vec::new();
    let mut node = trie.root();
    let mut last_logits: Option<Vec<f64>> = None;

    while emitted.len() < max_len {
        let logits = scorer.next_logits(src, &prefix)?;
        let allowed = trie
            .children(node)
            .keys()
            .copied()
            .chain(trie.is_terminal(node).then_some(EOS));
        let choice = argmax_allowed(&logits, allowed)
            .ok_or_else(|| Error::Invalid("trie node with no continuation".into()))?;
        last_logits = Some(logits);
        if choice == EOS {
            return lookup_docid(&emitted, registry, vocab);
        }
        node = trie.children(node)[&choice];
        emitted.push(choice);
        prefix.push(choice);
    }

    // budget exhausted: finish the path greedily under the latest scores
    if !trie.is_terminal(node) {
        let logits = match last_logits {
            Some(l) => l,
            None => scorer.next_logits(src, &prefix)?,
        };
        complete_to_terminal(trie, node, &logits, &mut emitted);
    }
    lookup_docid(&emitted, registry, vocab)
}

/// Trie-constrained greedy decoding from a bare BOS prefix.
pub fn constrained_greedy(
    scorer: &mut dyn TokenScorer,
    src: &[TokenId],
    trie: &TokenTrie,
    registry: &DocIdRegistry,
    vocab: &Vocab,
    max_len: usize,
) -> Result<DocId> {
    greedy_from_prefix(scorer, src, &[BOS], trie, registry, vocab, max_len)
}

/// Log-probabilities over the allowed set: logit minus the masked logsumexp.
fn masked_log_probs(logits: &[f64], allowed: &[TokenId]) -> Vec<f64> {
    let max = allowed
        .iter()
        .map(|&t| logits[t as usize])
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = allowed
        .iter()
        .map(|&t| (logits[t as usize] - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    allowed.iter().map(|&t| logits[t as usize] - lse).collect()
}

#[derive(Debug, Clone)]
struct Hypothesis {
    tokens: Vec<TokenId>,
    node: usize,
    log_prob: f64,
}

/// A finished hypothesis ranked by length-normalized log-probability
/// (cumulative log-probability divided by emitted length including EOS).
#[derive(Debug, Clone)]
pub struct RankedDocId {
    pub docid: DocId,
    pub score: f64,
}

/// Trie-constrained beam search. Width 1 reproduces greedy exactly; width at
/// least the number of registered docids enumerates them all.
pub fn constrained_beam(
    scorer: &mut dyn TokenScorer,
    src: &[TokenId],
    trie: &TokenTrie,
    registry: &DocIdRegistry,
    vocab: &Vocab,
    beam_width: usize,
    max_len: usize,
) -> Result<Vec<RankedDocId>> {
    if beam_width == 0 {
        return Err(Error::Config("beam width must be >= 1".into()));
    }
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        node: trie.root(),
        log_prob: 0.0,
    }];
    // (tokens, normalized score); never pruned once finished
    let mut finished: Vec<(Vec<TokenId>, f64)> = Vec::new();
    let mut last_logits: Option<Vec<f64>> = None;

    for _ in 0..max_len {
        if live.is_empty() {
            break;
        }
        // candidate = (cumulative log-prob, tokens, node, finished?)
        let mut candidates: Vec<(f64, Vec<TokenId>, usize, bool)> = Vec::new();
        for hyp in &live {
            let mut prefix = Vec::with_capacity(hyp.tokens.len() + 1);
            prefix.push(BOS);
            prefix.extend_from_slice(&hyp.tokens);
            let logits = scorer.next_logits(src, &prefix)?;
            let mut allowed: Vec<TokenId> = trie.children(hyp.node).keys().copied().collect();
            if trie.is_terminal(hyp.node) {
                allowed.push(EOS);
            }
            let log_probs = masked_log_probs(&logits, &allowed);
            for (&tok, &lp) in allowed.iter().zip(log_probs.iter()) {
                let score = hyp.log_prob + lp;
                if tok == EOS {
                    candidates.push((score, hyp.tokens.clone(), hyp.node, true));
                } else {
                    let mut tokens = hyp.tokens.clone();
                    tokens.push(tok);
                    candidates.push((score, tokens, trie.children(hyp.node)[&tok], false));
                }
            }
            last_logits = Some(logits);
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.1.cmp(&b.1))
        });
        candidates.truncate(beam_width);

        live = Vec::new();
        for (score, tokens, node, done) in candidates {
            if done {
                // +1 counts the EOS emission
                let norm = score / (tokens.len() + 1) as f64;
                finished.push((tokens, norm));
            } else {
                live.push(Hypothesis {
                    tokens,
                    node,
                    log_prob: score,
                });
            }
        }
    }

    if finished.is_empty() {
        // budget exhausted with no terminal hit: complete the best live
        // hypothesis under its latest scores, like greedy does
        let hyp = live
            .into_iter()
            .next()
            .ok_or_else(|| Error::Invalid("beam search exhausted all hypotheses".into()))?;
        let logits = last_logits.expect("at least one step scored");
        let mut tokens = hyp.tokens;
        complete_to_terminal(trie, hyp.node, &logits, &mut tokens);
        let norm = hyp.log_prob / (tokens.len() + 1) as f64;
        finished.push((tokens, norm));
    }

    finished.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    finished
        .into_iter()
        .map(|(tokens, score)| {
            Ok(RankedDocId {
                docid: lookup_docid(&tokens, registry, vocab)?,
                score,
            })
        })
        .collect()
}

/// Two-phase chain-of-thought decoding: free greedy generation until the
/// trace separator (or budget, when the separator is forced), then
/// trie-constrained decoding of the docid. Always yields a registered docid.
pub fn cot_decode(
    scorer: &mut dyn TokenScorer,
    src: &[TokenId],
    trie: &TokenTrie,
    registry: &DocIdRegistry,
    vocab: &Vocab,
    free_budget: usize,
    max_len: usize,
) -> Result<(String, DocId)> {
    let mut prefix = vec![BOS];
    let mut trace: Vec<TokenId> = Vec::new();
    for _ in 0..free_budget {
        let logits = scorer.next_logits(src, &prefix)?;
        let allowed = (0..scorer.vocab_size() as TokenId).filter(|&t| t != PAD && t != BOS && t != EOS && t != UNK);
        let choice = argmax_allowed(&logits, allowed)
            .ok_or_else(|| Error::Invalid("empty vocabulary".into()))?;
        prefix.push(choice);
        if choice == SEP {
            break;
        }
        trace.push(choice);
    }
    if prefix.last() != Some(&SEP) {
        prefix.push(SEP); // budget exhausted: force the separator
    }
    let docid = greedy_from_prefix(scorer, src, &prefix, trie, registry, vocab, max_len)?;
    Ok((decode_text(&trace, vocab), docid))
}

/// Unconstrained greedy decoding for the ablation path: argmax over the full
/// vocabulary until EOS or budget. The result may not be a registered docid;
/// `evaluate` reports the validity rate separately.
pub fn unconstrained_greedy(
    scorer: &mut dyn TokenScorer,
    src: &[TokenId],
    max_len: usize,
) -> Result<Vec<TokenId>> {
    let mut prefix = vec![BOS];
    let mut emitted = Vec::new();
    for _ in 0..max_len {
        let logits = scorer.next_logits(src, &prefix)?;
        let allowed = (0..scorer.vocab_size() as TokenId).filter(|&t| t != PAD && t != BOS && t != UNK);
        let choice = argmax_allowed(&logits, allowed)
            .ok_or_else(|| Error::Invalid("empty vocabulary".into()))?;
        if choice == EOS {
            break;
        }
        emitted.push(choice);
        prefix.push(choice);
    }
    Ok(emitted)
}

#[cfg(test)]
pub mod testing {
    //! Deterministic synthetic scorer for decoding properties.

    use super::*;

    /// Hash-based logits: a pure function of (salt, src, prefix), so decoding
    /// trials are deterministic and independent of any model.
    pub struct RandomScorer {
        pub vocab_size: usize,
        pub salt: u64,
    }

    impl TokenScorer for RandomScorer {
        fn vocab_size(&self) -> usize {
            self.vocab_size
        }

        fn next_logits(&mut self, src: &[TokenId], prefix: &[TokenId]) -> Result<Vec<f64>> {
            let mut state = self.salt ^ 0x9e37_79b9_7f4a_7c15;
            let mut mix = |v: u64| {
                state ^= v.wrapping_mul(0xff51_afd7_ed55_8ccd);
                state = state.rotate_left(31).wrapping_mul(0xc4ce_b9fe_1a85_ec53);
            };
            for &t in src {
                mix(t as u64 + 1);
            }
            mix(u64::MAX);
            for &t in prefix {
                mix(t as u64 + 1);
            }
            let mut out = Vec::with_capacity(self.vocab_size);
            for i in 0..self.vocab_size {
                let mut h = state ^ (i as u64).wrapping_mul(0x2545_f491_4f6c_dd1d);
                h ^= h >> 33;
                h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
                h ^= h >> 33;
                out.push((h as f64 / u64::MAX as f64) * 8.0 - 4.0);
            }
            Ok(out)
        }
    }
}
