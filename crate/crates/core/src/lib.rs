//! Multilingual code search at desk scale.
//!
//! The crate covers the whole pipeline: loading docstring/code corpora
//! ([`corpus`]), translating docstrings through an external MT service
//! ([`translation`]), filtering translations by back-translation BLEU
//! ([`filtering`]), a byte-level BPE vocabulary ([`tokenizer`]), a small
//! transformer cross-encoder trained with masked language modelling and then
//! fine-tuned for query/code relevance ([`model`]), and mean reciprocal rank
//! evaluation over distractor pools ([`eval`]).

pub mod artifact;
pub mod cli;
pub mod corpus;
pub mod eval;
pub mod filtering;
pub mod model;
pub mod rng;
pub mod synthetic;
pub mod tokenizer;
pub mod translation;
