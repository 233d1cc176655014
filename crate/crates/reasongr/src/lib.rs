//! Generative retrieval at desk scale.
//!
//! The pipeline: ingest a FinQA-style corpus, build keyword docids and their
//! trie ([`corpus`]), compose reasoning-enhanced prompts ([`prompts`]),
//! tokenize ([`tokenizer`]), train a tiny encoder-decoder whose frozen 4-bit
//! base is adapted with low-rank factors ([`model`], [`quant`], [`lora`],
//! [`optim`]), score with a penalty-scaled cross-entropy ([`loss`]), decode
//! docids under trie constraints ([`decode`]), and evaluate with EM/PM/SM/
//! S-Score ([`metrics`]) against a BM25 baseline ([`baseline`]).
//!
//! Full-scale FinQA training with a FLAN-T5 backbone is out of scope here;
//! the crate targets exact, property-testable behaviour on small corpora.

pub mod baseline;
pub mod checkpoint;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod loss;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod prompts;
pub mod quant;
pub mod synth;
pub mod text;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
