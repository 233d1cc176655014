//! The two training tasks (indexing and retrieval), pseudo-query
//! generation, query-level splits, the training loop with early stopping on
//! validation PM, and split evaluation.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{build_registry, flatten_table, ingest_corpus, DocIdRegistry, Document};
use crate::decode::{constrained_greedy, cot_decode, unconstrained_greedy, ModelScorer, TokenTrie};
use crate::error::{Error, Result};
use crate::loss::PenaltyWeights;
use crate::metrics::{aggregate, MetricValues, MetricsReport, QueryRecord};
use crate::model::{AdapterSet, Gradients, ModelDims, SeqModel};
use crate::optim::{adam_step, OptimizerState, DEFAULT_GRAD_CLIP, DEFAULT_LR_A, DEFAULT_LR_RATIO};
use crate::prompts::{
    compose_prompt, format_target, surface_from_target, PromptMode, COT_INSTRUCTIONS,
    TASK_TEMPLATES,
};
use crate::text::content_tokens;
use crate::tokenizer::{build_vocab, encode, tokens as token_strs, TokenId, Vocab, EOS};

/// Flat training configuration; the config file holds exactly these keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation-PM improvement tolerated before stopping.
    pub patience: usize,
    pub seed: u64,
    pub mode: PromptMode,
    pub w_em: f64,
    pub w_pm: f64,
    pub w_sm: f64,
    pub w_s: f64,
    pub pseudo_queries_per_doc: usize,
    pub lr_a: f64,
    /// λ: B factors train at λ·lr_a.
    pub lr_ratio: f64,
    pub split_train: f64,
    pub split_val: f64,
    pub split_test: f64,
    pub keywords_per_docid: usize,
    pub fewshot_examples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            seed: 17,
            mode: PromptMode::Plain,
            w_em: 0.5,
            w_pm: 0.5,
            w_sm: 0.5,
            w_s: 0.5,
            pseudo_queries_per_doc: 10,
            lr_a: DEFAULT_LR_A,
            lr_ratio: DEFAULT_LR_RATIO,
            split_train: 0.75,
            split_val: 0.10,
            split_test: 0.15,
            keywords_per_docid: 3,
            fewshot_examples: 2,
        }
    }
}

impl TrainConfig {
    pub fn penalty_weights(&self) -> PenaltyWeights {
        PenaltyWeights {
            w_em: self.w_em,
            w_pm: self.w_pm,
            w_sm: self.w_sm,
            w_s: self.w_s,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        let total = self.split_train + self.split_val + self.split_test;
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions sum to {total}, expected 1"
            )));
        }
        if self.split_val <= 0.0 || self.split_test <= 0.0 || self.split_train <= 0.0 {
            return Err(Error::Config("split fractions must be positive".into()));
        }
        let w = self.penalty_weights();
        for (name, v) in [("w_em", w.w_em), ("w_pm", w.w_pm), ("w_sm", w.w_sm), ("w_s", w.w_s)] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a finite value >= 0")));
            }
        }
        if self.pseudo_queries_per_doc == 0 {
            return Err(Error::Config("pseudo_queries_per_doc must be >= 1".into()));
        }
        Ok(())
    }

    /// Parses a flat TOML `key = value` file with these exact keys.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleKind {
    Indexing,
    Retrieval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub input: String,
    pub target: String,
    pub kind: ExampleKind,
    pub raw_id: String,
}

/// Sentence chunks of up to 32 whitespace tokens; an overlong sentence is
/// truncated rather than split.
fn text_chunks(doc: &Document, max_tokens: usize) -> Vec<String> {
    let mut chunks = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    let mut current_len = 0usize;
    for sentence in doc.sentences() {
        let words: Vec<&str> = sentence.split_whitespace().collect();
        if words.is_empty() {
            continue;
        }
        let take = words.len().min(max_tokens);
        if current_len + take > max_tokens && !current.is_empty() {
            chunks.push(current.join(" "));
            current = Vec::new();
            current_len = 0;
        }
        current.extend(&words[..take]);
        current_len += take;
    }
    if !current.is_empty() {
        chunks.push(current.join(" "));
    }
    chunks
}

/// Indexing task: every text chunk and table segment maps to the document's
/// docid surface, with no prompt template around the input.
pub fn make_indexing_examples(
    docs: &[Document],
    registry: &DocIdRegistry,
) -> Vec<TrainingExample> {
    let mut out = Vec::new();
    for doc in docs {
        let surface = registry
            .docid_for(&doc.raw_id)
            .expect("registry covers every document")
            .surface
            .clone();
        for chunk in text_chunks(doc, 32) {
            out.push(TrainingExample {
                input: chunk,
                target: surface.clone(),
                kind: ExampleKind::Indexing,
                raw_id: doc.raw_id.clone(),
            });
        }
        for segment in flatten_table(doc) {
            out.push(TrainingExample {
                input: segment.text,
                target: surface.clone(),
                kind: ExampleKind::Indexing,
                raw_id: doc.raw_id.clone(),
            });
        }
    }
    out
}

/// Question templates instantiated with document fields. Every query names
/// the company and year; the fallback for bare documents carries an index
/// suffix for uniqueness.
pub fn generate_pseudo_queries<R: Rng>(
    doc: &Document,
    keywords: &[String],
    n: usize,
    rng: &mut R,
) -> Vec<String> {
    let row_headers: Vec<&str> = doc
        .table
        .iter()
        .skip(1)
        .filter_map(|r| r.first())
        .map(String::as_str)
        .filter(|h| !h.trim().is_empty())
        .collect();
    let company = doc.company.as_str();
    let year = doc.year.as_str();

    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let header = (!row_headers.is_empty()).then(|| row_headers[rng.gen_range(0..row_headers.len())]);
        let keyword = (!keywords.is_empty()).then(|| keywords[rng.gen_range(0..keywords.len())].as_str());
        let query = match (header, keyword) {
            (Some(rh), Some(kw)) => match rng.gen_range(0..6) {
                0 => format!("what was the {rh} in {year} for {company}?"),
                1 => format!("what is the {rh} of {company} in {year}?"),
                2 => format!("how much {kw} did {company} report in {year}?"),
                3 => format!("find the {kw} details for {company} {year}"),
                4 => format!("what does {company} say about {kw} in {year}?"),
                _ => format!("value of {rh} for {company} in {year}"),
            },
            (Some(rh), None) => match rng.gen_range(0..2) {
                0 => format!("what was the {rh} in {year} for {company}?"),
                _ => format!("value of {rh} for {company} in {year}"),
            },
            (None, Some(kw)) => match rng.gen_range(0..2) {
                0 => format!("how much {kw} did {company} report in {year}?"),
                _ => format!("what does {company} say about {kw} in {year}?"),
            },
            (None, None) => format!("information about {company} {year} {}", i + 1),
        };
        out.push(query);
    }
    out
}

/// A retrieval query paired with its gold document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySample {
    pub query: String,
    pub raw_id: String,
}

/// Gold question (when present) plus n pseudo-queries per document.
fn collect_queries<R: Rng>(
    docs: &[Document],
    registry: &DocIdRegistry,
    n: usize,
    rng: &mut R,
) -> Vec<QuerySample> {
    let mut out = Vec::new();
    for doc in docs {
        let keywords: Vec<String> = registry
            .docid_for(&doc.raw_id)
            .map(|id| id.components.iter().skip(2).cloned().collect())
            .unwrap_or_default();
        if let Some(q) = &doc.question {
            out.push(QuerySample {
                query: q.clone(),
                raw_id: doc.raw_id.clone(),
            });
        }
        for query in generate_pseudo_queries(doc, &keywords, n, rng) {
            out.push(QuerySample {
                query,
                raw_id: doc.raw_id.clone(),
            });
        }
    }
    out
}

/// Two synthesized reasoning steps: the query's key phrase, then the
/// company/year line.
fn synthesize_trace(query: &str, doc_keywords: &[String], company: &str, year: &str) -> Vec<String> {
    let toks = content_tokens(query);
    let key_phrase = toks
        .iter()
        .find(|t| doc_keywords.iter().any(|k| k == *t))
        .or_else(|| toks.first())
        .cloned()
        .unwrap_or_else(|| "the query".to_string());
    vec![
        format!("focus on {key_phrase}"),
        format!("company {company}, year {year}"),
    ]
}

/// Wraps each query in a composed prompt with the configured mode. Few-shot
/// demonstrations come from a dedicated pool (one extra pseudo-query per
/// document) and never show the example's own document.
pub fn make_retrieval_examples(
    docs: &[Document],
    registry: &DocIdRegistry,
    config: &TrainConfig,
    queries: &[QuerySample],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TrainingExample>> {
    // demo pool for few-shot prompts
    let mut demo_rng = ChaCha8Rng::seed_from_u64(rng.gen());
    let mut demos: Vec<(String, String, String)> = Vec::new(); // (query, surface, raw_id)
    if config.mode.uses_fewshot() {
        for doc in docs {
            let id = registry.docid_for(&doc.raw_id).expect("registered");
            let keywords: Vec<String> = id.components.iter().skip(2).cloned().collect();
            let q = generate_pseudo_queries(doc, &keywords, 1, &mut demo_rng)
                .pop()
                .expect("n >= 1");
            demos.push((q, id.surface.clone(), doc.raw_id.clone()));
        }
    }

    let by_id: std::collections::HashMap<&str, &Document> =
        docs.iter().map(|d| (d.raw_id.as_str(), d)).collect();

    let mut out = Vec::with_capacity(queries.len());
    for sample in queries {
        let doc = by_id
            .get(sample.raw_id.as_str())
            .ok_or_else(|| Error::Invalid(format!("query references unknown doc {}", sample.raw_id)))?;
        let docid = registry.docid_for(&sample.raw_id).expect("registered");

        let fewshot: Vec<(String, String)> = if config.mode.uses_fewshot() {
            let candidates: Vec<&(String, String, String)> = demos
                .iter()
                .filter(|(_, _, raw)| raw != &sample.raw_id)
                .collect();
            (0..config.fewshot_examples)
                .map(|_| {
                    let pick = candidates[demo_rng.gen_range(0..candidates.len())];
                    (pick.0.clone(), pick.1.clone())
                })
                .collect()
        } else {
            Vec::new()
        };

        let prompt = compose_prompt(rng, &sample.query, config.mode, &fewshot)?;
        let target = if config.mode.uses_cot() {
            let keywords: Vec<String> = docid.components.iter().skip(2).cloned().collect();
            let trace = synthesize_trace(&sample.query, &keywords, &doc.company, &doc.year);
            format_target(docid, Some(&trace), config.mode)?
        } else {
            format_target(docid, None, config.mode)?
        };
        out.push(TrainingExample {
            input: prompt.input_text,
            target,
            kind: ExampleKind::Retrieval,
            raw_id: sample.raw_id.clone(),
        });
    }
    Ok(out)
}

/// The assembled training data: indexing examples over every document, and
/// retrieval examples split by query.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub indexing: Vec<TrainingExample>,
    pub train: Vec<TrainingExample>,
    pub val: Vec<TrainingExample>,
    pub test: Vec<TrainingExample>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&[TrainingExample]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::UnknownSplit(other.to_string())),
        }
    }
}

/// Builds the dataset as a pure function of (docs, config): pseudo-queries,
/// prompt composition, and the 75/10/15 query-level shuffle all derive from
/// config.seed. Documents are shared across splits (indexing covers all of
/// them); queries are not.
pub fn build_dataset(
    docs: &[Document],
    registry: &DocIdRegistry,
    config: &TrainConfig,
) -> Result<Dataset> {
    let mut seed_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut query_rng = ChaCha8Rng::seed_from_u64(seed_rng.gen());
    let mut prompt_rng = ChaCha8Rng::seed_from_u64(seed_rng.gen());
    let mut split_rng = ChaCha8Rng::seed_from_u64(seed_rng.gen());

    let queries = collect_queries(docs, registry, config.pseudo_queries_per_doc, &mut query_rng);
    let examples = make_retrieval_examples(docs, registry, config, &queries, &mut prompt_rng)?;

    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut split_rng);
    let m = examples.len();
    let n_train = ((m as f64) * config.split_train).round() as usize;
    let n_val = (((m as f64) * config.split_val).round() as usize).max(1);
    let n_train = n_train.min(m.saturating_sub(2));

    let pick = |idxs: &[usize]| -> Vec<TrainingExample> {
        idxs.iter().map(|&i| examples[i].clone()).collect()
    };
    let train = pick(&order[..n_train]);
    let val = pick(&order[n_train..(n_train + n_val).min(m)]);
    let test = pick(&order[(n_train + n_val).min(m)..]);

    Ok(Dataset {
        indexing: make_indexing_examples(docs, registry),
        train,
        val,
        test,
    })
}

/// One epoch's log line. Wall-clock and memory are observational and are
/// excluded from determinism comparisons.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub penalty_mean: f64,
    pub val_em: f64,
    pub val_pm: f64,
    pub val_sm: f64,
    pub val_s: f64,
    pub examples_seen: usize,
    pub wall_clock_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub peak_rss_kb: Option<u64>,
}

impl EpochRecord {
    /// The seed-reproducible projection of the record.
    pub fn deterministic_fields(&self) -> (usize, u64, u64, u64, u64, u64, usize) {
        (
            self.epoch,
            self.train_loss.to_bits(),
            self.penalty_mean.to_bits(),
            self.val_em.to_bits(),
            self.val_pm.to_bits(),
            (self.val_sm.to_bits() ^ self.val_s.to_bits()),
            self.examples_seen,
        )
    }
}

/// A finished training run: best-PM checkpoint plus the per-epoch log.
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_pm: f64,
}

fn peak_rss_kb() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    for line in status.lines() {
        if let Some(rest) = line.strip_prefix("VmHWM:") {
            return rest.trim().trim_end_matches(" kB").trim().parse().ok();
        }
    }
    None
}

/// Scaffolding strings whose words must be in the vocabulary.
fn prompt_scaffold() -> Vec<String> {
    let mut texts: Vec<String> = TASK_TEMPLATES.iter().map(|s| s.to_string()).collect();
    texts.extend(COT_INSTRUCTIONS.iter().map(|s| s.to_string()));
    texts.push("Query: Document ID:".to_string());
    texts
}

/// Trains on a corpus file; see [`train_docs`].
pub fn train(config: &TrainConfig, corpus_path: &Path) -> Result<TrainRun> {
    let ingest = ingest_corpus(corpus_path)?;
    train_docs(config, ingest.documents)
}

/// Runs the full loop: build registry/vocab/dataset, train with the
/// penalty-scaled loss, evaluate validation PM by constrained greedy
/// decoding each epoch, stop early when PM stalls past the patience budget,
/// and return the best-PM checkpoint.
pub fn train_docs(config: &TrainConfig, docs: Vec<Document>) -> Result<TrainRun> {
    config.validate()?;
    if docs.is_empty() {
        return Err(Error::Invalid("cannot train on an empty corpus".into()));
    }
    let start = Instant::now();
    let registry = build_registry(&docs, config.keywords_per_docid)?;
    let dataset = build_dataset(&docs, &registry, config)?;

    // vocabulary over documents, docid components, scaffolding, and every
    // composed example (val/test queries included, so encoding never drifts)
    let mut prompt_texts: Vec<String> = prompt_scaffold();
    for ex in dataset
        .indexing
        .iter()
        .chain(&dataset.train)
        .chain(&dataset.val)
        .chain(&dataset.test)
    {
        prompt_texts.push(ex.input.clone());
        prompt_texts.push(ex.target.clone());
    }
    let prompt_refs: Vec<&str> = prompt_texts.iter().map(String::as_str).collect();
    let vocab = build_vocab(&docs, &registry, &prompt_refs);

    let mut seed_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let mut model_rng = ChaCha8Rng::seed_from_u64(seed_rng.gen());
    let mut train_rng = ChaCha8Rng::seed_from_u64(seed_rng.gen());

    let dims = ModelDims::with_vocab(vocab.len());
    let mut model = SeqModel::init(dims, &mut model_rng)?;
    let mut adapters = AdapterSet::init(&model, crate::lora::DEFAULT_RANK, &mut model_rng)?;
    let mut optimizer = OptimizerState::new(&model, &adapters, config.lr_a, config.lr_ratio);
    let trie = TokenTrie::from_registry(&registry, &vocab)?;
    let weights = config.penalty_weights();

    // pre-encode every training example once
    let mut pool: Vec<TrainingExample> = dataset.indexing.clone();
    pool.extend(dataset.train.iter().cloned());
    let encoded: Vec<(Vec<TokenId>, Vec<TokenId>)> = pool
        .iter()
        .map(|ex| encode_example(ex, &vocab, &model.dims))
        .collect();

    let mut log: Vec<EpochRecord> = Vec::new();
    let mut best_val_pm = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_adapters = adapters.clone();
    let mut since_improve = 0usize;

    let mut order: Vec<usize> = (0..pool.len()).collect();
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut train_rng);
        let mut loss_sum = 0.0;
        let mut penalty_sum = 0.0;
        let mut seen = 0usize;

        for batch in order.chunks(config.batch_size) {
            let mut grads = Gradients::zeros_like(&adapters, model.norm_table());
            let inv = 1.0 / batch.len() as f64;
            for &i in batch {
                let (src, tgt) = &encoded[i];
                let (ce, p, example_grads) =
                    model.backward_with_penalty(&adapters, src, tgt, &weights)?;
                let loss = ce * p;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: seen / config.batch_size,
                        example: pool[i].raw_id.clone(),
                    });
                }
                grads.add_scaled(&example_grads, inv);
                loss_sum += loss;
                penalty_sum += p;
                seen += 1;
            }
            grads.clip_global_norm(DEFAULT_GRAD_CLIP);
            adam_step(&mut optimizer, &mut model, &mut adapters, &grads);
        }

        let val_report = evaluate_examples(
            &model,
            &adapters,
            &vocab,
            &trie,
            &registry,
            &dataset.val,
            config.mode,
            true,
        )?
        .report;

        if val_report.pm > best_val_pm {
            best_val_pm = val_report.pm;
            best_epoch = epoch;
            best_adapters = adapters.clone();
            since_improve = 0;
        } else {
            since_improve += 1;
        }

        log.push(EpochRecord {
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            penalty_mean: penalty_sum / seen.max(1) as f64,
            val_em: val_report.em,
            val_pm: val_report.pm,
            val_sm: val_report.sm,
            val_s: val_report.s_score,
            examples_seen: seen,
            wall_clock_s: start.elapsed().as_secs_f64(),
            peak_rss_kb: peak_rss_kb(),
        });

        if since_improve > config.patience {
            break;
        }
    }

    let checkpoint = Checkpoint {
        version: Checkpoint::VERSION,
        config: config.clone(),
        model,
        adapters: best_adapters,
        optimizer,
        rng: train_rng,
        vocab,
        registry,
    };
    Ok(TrainRun {
        checkpoint,
        log,
        best_epoch,
        best_val_pm,
    })
}

fn encode_example(
    ex: &TrainingExample,
    vocab: &Vocab,
    dims: &ModelDims,
) -> (Vec<TokenId>, Vec<TokenId>) {
    let mut src = encode(&ex.input, vocab);
    if src.is_empty() {
        src.push(crate::tokenizer::UNK);
    }
    if src.len() > dims.max_src_len {
        // the query sits at the end of composed prompts: keep the tail
        src.drain(..src.len() - dims.max_src_len);
    }
    let mut tgt = encode(&ex.target, vocab);
    tgt.push(EOS);
    if tgt.len() > dims.max_tgt_len {
        tgt.truncate(dims.max_tgt_len - 1);
        tgt.push(EOS);
    }
    (src, tgt)
}

/// Evaluation outcome: the metrics report plus, for unconstrained decoding,
/// the fraction of decoded sequences that were registered docids.
pub struct EvalOutcome {
    pub report: MetricsReport,
    pub validity_rate: Option<f64>,
}

/// Decodes every example of a split and aggregates EM/PM/SM/S over docid
/// components. CoT modes score only the docid after the trace separator.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_examples(
    model: &SeqModel,
    adapters: &AdapterSet,
    vocab: &Vocab,
    trie: &TokenTrie,
    registry: &DocIdRegistry,
    examples: &[TrainingExample],
    mode: PromptMode,
    constrained: bool,
) -> Result<EvalOutcome> {
    if examples.is_empty() {
        return Err(Error::Invalid("cannot evaluate an empty split".into()));
    }
    let max_len = model.dims.max_tgt_len.saturating_sub(2);
    let free_budget = 12usize;
    let mut records = Vec::with_capacity(examples.len());
    let mut valid = 0usize;

    for (i, ex) in examples.iter().enumerate() {
        let mut scorer = ModelScorer::new(model, adapters);
        let mut src = encode(&ex.input, vocab);
        if src.is_empty() {
            src.push(crate::tokenizer::UNK);
        }
        if src.len() > model.dims.max_src_len {
            src.drain(..src.len() - model.dims.max_src_len);
        }
        let gold_surface = surface_from_target(&ex.target).to_string();
        let gold: Vec<String> = gold_surface.split('-').map(str::to_string).collect();

        let (pred_surface, pred): (String, Vec<String>) = if !constrained {
            let emitted = unconstrained_greedy(&mut scorer, &src, max_len + free_budget)?;
            // score the portion after the separator, mirroring CoT scoring
            let mut after_sep: Vec<TokenId> = emitted.clone();
            if let Some(pos) = emitted.iter().rposition(|&t| t == crate::tokenizer::SEP) {
                after_sep = emitted[pos + 1..].to_vec();
            }
            let comps: Vec<String> = token_strs(&after_sep, vocab)
                .into_iter()
                .map(str::to_string)
                .collect();
            let surface = comps.join("-");
            if registry.raw_id_for(&surface).is_some() {
                valid += 1;
            }
            (surface, comps)
        } else if mode.uses_cot() {
            let (_, docid) = cot_decode(
                &mut scorer,
                &src,
                trie,
                registry,
                vocab,
                free_budget,
                max_len,
            )?;
            valid += 1;
            let comps = docid.components.clone();
            (docid.surface, comps)
        } else {
            let docid = constrained_greedy(&mut scorer, &src, trie, registry, vocab, max_len)?;
            valid += 1;
            let comps = docid.components.clone();
            (docid.surface, comps)
        };

        let values = MetricValues::compute(&pred, &gold);
        records.push(QueryRecord {
            query_id: format!("{}#{}", ex.raw_id, i),
            pred_surface: pred_surface.clone(),
            gold_surface,
            values,
        });
    }

    let validity_rate = (!constrained).then(|| valid as f64 / examples.len() as f64);
    Ok(EvalOutcome {
        report: aggregate(records)?,
        validity_rate,
    })
}

/// Evaluates one named split of a checkpoint, rebuilding the dataset from
/// the stored config (the split is a pure function of corpus and seed).
pub fn evaluate(
    checkpoint: &Checkpoint,
    docs: &[Document],
    split: &str,
    mode: PromptMode,
    constrained: bool,
) -> Result<EvalOutcome> {
    let dataset = build_dataset(docs, &checkpoint.registry, &checkpoint.config)?;
    let examples = dataset.split(split)?;
    let trie = TokenTrie::from_registry(&checkpoint.registry, &checkpoint.vocab)?;
    evaluate_examples(
        &checkpoint.model,
        &checkpoint.adapters,
        &checkpoint.vocab,
        &trie,
        &checkpoint.registry,
        examples,
        mode,
        constrained,
    )
}
