//! Synthetic docstring/code corpora with a known relevance signal.
//!
//! Each record draws `content_words` distinct words from a shared pool of
//! invented words. The docstring mentions all of them; the code mentions them
//! plus one extra pool word, wrapped in fixed syntax that never appears in a
//! docstring. Records are generated in rounds: within a round the pool is
//! split into disjoint groups, so a query shares `content_words` tokens with
//! its own code and none with any other code from the same round.

use std::collections::HashSet;

use crate::corpus::{CorpusError, CorpusRecord, NatLang, Partition, PairExample, ProgLang, TestSet};
use crate::eval::{mrr, EvalError, ModelScorer, MrrResult};
use crate::model::{
    finetune_pairs, pretrain_mlm, EncoderConfig, EncoderModel, FinetuneReport, ModelError, PretrainReport, TrainConfig,
};
use crate::rng::SeededRng;
use crate::tokenizer::{TokenizerError, Vocabulary};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

/// `n` distinct two- or three-syllable lowercase words.
pub fn word_pool(n: usize, seed: u64) -> Vec<String> {
    let mut rng = SeededRng::derive(seed, "word-pool");
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = 2 + rng.below(2);
        let w: String = (0..syllables)
            .map(|_| format!("{}{}", ONSETS[rng.below(ONSETS.len())], VOWELS[rng.below(VOWELS.len())]))
            .collect();
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub records: usize,
    pub pool_size: usize,
    /// Words shared between a docstring and its code.
    pub content_words: usize,
    pub pl: ProgLang,
    pub nl: NatLang,
    pub partition: Partition,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            records: 500,
            pool_size: 400,
            content_words: 3,
            pl: ProgLang::Go,
            nl: NatLang::En,
            partition: Partition::Train,
            seed: 0,
        }
    }
}

/// Records with pairwise-distinct codes, deterministic in `spec`. Every
/// consecutive run of `pool_size / (content_words + 1)` records is one round.
pub fn separable_corpus(spec: &SyntheticSpec) -> Vec<CorpusRecord> {
    let group = spec.content_words + 1;
    assert!(spec.content_words > 0 && spec.pool_size >= group, "pool must hold one record's words");
    let pool = word_pool(spec.pool_size, spec.seed);
    let mut rng = SeededRng::derive(spec.seed, &format!("records-{}", spec.partition));
    let mut codes = HashSet::new();
    let mut out = Vec::with_capacity(spec.records);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    while out.len() < spec.records {
        rng.shuffle(&mut order);
        for chunk in order.chunks_exact(group) {
            if out.len() == spec.records {
                break;
            }
            let mut args: Vec<&str> = chunk.iter().map(|&i| pool[i].as_str()).collect();
            let docstring = format!("returns the {}", args[..spec.content_words].join(" "));
            rng.shuffle(&mut args);
            let (ret, params) = args.split_last().expect("group is non-empty");
            let code = format!("func ( {} ) {{ return {ret} }}", params.join(" , "));
            if !codes.insert(code.clone()) {
                continue;
            }
            out.push(CorpusRecord {
                id: format!("syn-{}-{}", spec.partition, out.len()),
                docstring,
                code,
                pl: spec.pl,
                nl: spec.nl,
                url: String::new(),
                partition: spec.partition,
            });
        }
    }
    out
}

/// English Go records whose docstrings run from 1 to 24 words, so that
/// token-dropping translations spread their round-trip scores widely.
pub fn docstring_fixture(n: usize, seed: u64) -> Vec<CorpusRecord> {
    let pool = word_pool(200, seed);
    let mut rng = SeededRng::derive(seed, "docstring-fixture");
    (0..n)
        .map(|i| {
            let len = 1 + rng.below(24);
            let words: Vec<&str> = (0..len).map(|_| pool[rng.below(pool.len())].as_str()).collect();
            CorpusRecord {
                id: format!("fx-{i}"),
                docstring: words.join(" "),
                code: format!("func f{i}() {{ return {} }}", words[0]),
                pl: ProgLang::Go,
                nl: NatLang::En,
                url: String::new(),
                partition: Partition::Train,
            }
        })
        .collect()
}

/// One positive and one negative pair per record, where each negative's code
/// shares no whitespace token with the query.
pub fn separable_pairs(records: &[CorpusRecord], seed: u64) -> Vec<PairExample> {
    let mut rng = SeededRng::derive(seed, "separable-negatives");
    let mut out = Vec::with_capacity(2 * records.len());
    for rec in records {
        let disjoint = |r: &&CorpusRecord| shared_tokens(&rec.docstring, &r.code) == 0;
        let neg = match (0..64).map(|_| &records[rng.below(records.len())]).find(disjoint) {
            Some(r) => r,
            None => {
                let candidates: Vec<&CorpusRecord> = records.iter().filter(disjoint).collect();
                assert!(!candidates.is_empty(), "no disjoint negative for {}", rec.id);
                candidates[rng.below(candidates.len())]
            }
        };
        for (label, code) in [(1, &rec.code), (0, &neg.code)] {
            out.push(PairExample { label, query: rec.docstring.clone(), code: code.clone(), nl: rec.nl, pl: rec.pl });
        }
    }
    out
}

/// Whitespace tokens two texts have in common.
pub fn shared_tokens(a: &str, b: &str) -> usize {
    let left: HashSet<&str> = a.split_whitespace().collect();
    let right: HashSet<&str> = b.split_whitespace().collect();
    left.intersection(&right).count()
}

/// Pretrain, fine-tune and evaluate on separable synthetic data.
#[derive(Debug, Clone)]
pub struct RetrievalExperiment {
    pub train: SyntheticSpec,
    /// Test records; one round of the pool gives fully disjoint distractors.
    pub test_records: usize,
    pub vocab_size: usize,
    /// Encoder shape; `vocab_size` is overwritten by the trained vocabulary.
    pub encoder: EncoderConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub pair_seed: u64,
}

impl Default for RetrievalExperiment {
    fn default() -> Self {
        Self {
            train: SyntheticSpec { records: 3000, seed: 1, ..Default::default() },
            test_records: 100,
            vocab_size: 1024,
            encoder: EncoderConfig {
                layers: 2,
                heads: 4,
                hidden: 64,
                ffn: 128,
                max_len: 48,
                vocab_size: 0,
                dropout: 0.0,
                seed: 7,
            },
            pretrain: TrainConfig { batch_size: 32, learning_rate: 1e-3, max_epochs: 10, seed: 3, ..TrainConfig::pretrain() },
            finetune: TrainConfig { batch_size: 16, learning_rate: 1e-3, max_epochs: 6, seed: 4, ..TrainConfig::finetune() },
            pair_seed: 5,
        }
    }
}

impl RetrievalExperiment {
    /// A few-second variant for smoke tests and determinism checks.
    pub fn quick() -> Self {
        let mut e = Self::default();
        e.train.records = 1000;
        e.test_records = 20;
        e.vocab_size = 800;
        e.encoder.hidden = 32;
        e.encoder.ffn = 64;
        e.pretrain.max_epochs = 4;
        e.finetune.max_epochs = 4;
        e
    }

    pub fn run(&self) -> Result<RetrievalOutcome, ExperimentError> {
        let train = separable_corpus(&self.train);
        let test = separable_corpus(&SyntheticSpec {
            records: self.test_records,
            partition: Partition::Test,
            ..self.train.clone()
        });
        let texts: Vec<&str> = train.iter().flat_map(|r| [r.docstring.as_str(), r.code.as_str()]).collect();
        let vocab = Vocabulary::train(&texts, self.vocab_size)?;
        let mut model = EncoderModel::new(EncoderConfig { vocab_size: vocab.len(), ..self.encoder.clone() })?;
        let max_len = self.encoder.max_len;
        let encoded: Vec<_> = train.iter().map(|r| vocab.encode_pair(&r.docstring, &r.code, max_len)).collect();
        let pretrain = pretrain_mlm(&mut model, &encoded, &self.pretrain)?;
        let pairs = separable_pairs(&train, self.pair_seed);
        let finetune = finetune_pairs(&mut model, &vocab, &pairs, &self.finetune)?;
        let set = TestSet::from_records(&test)?;
        let mrr = mrr(&set, &ModelScorer { model: &model, vocab: &vocab })?;
        Ok(RetrievalOutcome { mrr, pretrain, finetune, model, vocab })
    }
}

#[derive(Debug)]
pub struct RetrievalOutcome {
    pub mrr: MrrResult,
    pub pretrain: PretrainReport,
    pub finetune: FinetuneReport,
    pub model: EncoderModel,
    pub vocab: Vocabulary,
}
