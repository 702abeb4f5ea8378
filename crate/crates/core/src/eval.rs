//! Mean reciprocal rank over distractor pools, and label agreement.
//!
//! Every query in a [`TestSet`] is scored against every code in the same set;
//! the other codes act as distractors. The rank of the true code is
//! `1 + #{codes scoring strictly higher}`, so ties never push the true code
//! down ([`TiePolicy::StrictGreater`]).

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{self, Write};
use std::sync::RwLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::ArtifactHeader;
use crate::corpus::TestSet;
use crate::model::EncoderModel;
use crate::rng::SeededRng;
use crate::tokenizer::Vocabulary;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("test set is empty")]
    EmptySet,
    #[error("no test sets given")]
    NoSets,
    #[error("scorer returned {score} for query {query_id:?} against code of {code_id:?}")]
    NonFinite { query_id: String, code_id: String, score: f64 },
    #[error("scorer returned {got} scores for {expected} codes")]
    ScoreCount { expected: usize, got: usize },
    #[error("label vectors differ in length: {human} vs {original}")]
    LengthMismatch { human: usize, original: usize },
    #[error("label {0} is not 0 or 1")]
    InvalidLabel(u8),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// How codes scoring exactly the true code's score are counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TiePolicy {
    /// Only strictly higher scores outrank the true code.
    StrictGreater,
}

impl fmt::Display for TiePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TiePolicy::StrictGreater => "strict-greater",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrrResult {
    pub per_set: Vec<f64>,
    pub mean: f64,
    /// Queries per set.
    pub n_queries: usize,
    pub tie_policy: TiePolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRecord {
    pub query_id: String,
    pub rank: usize,
    pub true_score: f64,
}

/// Relevance of a code to a query. Higher is more relevant.
pub trait Scorer: Sync {
    fn score(&self, query: &str, code: &str) -> f64;

    /// Scores of one query against many codes, in order.
    fn score_many(&self, query: &str, codes: &[&str]) -> Vec<f64> {
        codes.iter().map(|c| self.score(query, c)).collect()
    }
}

impl<F: Fn(&str, &str) -> f64 + Sync> Scorer for F {
    fn score(&self, query: &str, code: &str) -> f64 {
        self(query, code)
    }
}

/// 1 for pairs present in the given sets, 0 otherwise.
#[derive(Debug, Clone, Default)]
pub struct OracleScorer {
    truth: HashMap<String, HashSet<String>>,
}

impl OracleScorer {
    pub fn new<'a>(sets: impl IntoIterator<Item = &'a TestSet>) -> Self {
        let mut truth: HashMap<String, HashSet<String>> = HashMap::new();
        for e in sets.into_iter().flat_map(|s| &s.entries) {
            truth.entry(e.query.clone()).or_default().insert(e.code.clone());
        }
        Self { truth }
    }
}

impl Scorer for OracleScorer {
    fn score(&self, query: &str, code: &str) -> f64 {
        if self.truth.get(query).is_some_and(|codes| codes.contains(code)) {
            1.0
        } else {
            0.0
        }
    }
}

/// Deterministic pseudo-random scores in `[0, 1)`, a function of
/// `(seed, query, code)`; the chance baseline.
#[derive(Debug, Clone, Copy)]
pub struct RandomScorer {
    pub seed: u64,
}

impl Scorer for RandomScorer {
    fn score(&self, query: &str, code: &str) -> f64 {
        let mut key = String::with_capacity(query.len() + code.len() + 1);
        key.push_str(query);
        key.push('\0');
        key.push_str(code);
        SeededRng::derive(self.seed, &key).unit_f64()
    }
}

/// Cross-encoder relevance probabilities, one packed forward pass per chunk.
pub struct ModelScorer<'a> {
    pub model: &'a EncoderModel,
    pub vocab: &'a Vocabulary,
}

impl Scorer for ModelScorer<'_> {
    fn score(&self, query: &str, code: &str) -> f64 {
        self.model.score(self.vocab, query, code)
    }

    fn score_many(&self, query: &str, codes: &[&str]) -> Vec<f64> {
        let pairs: Vec<(&str, &str)> = codes.iter().map(|c| (query, *c)).collect();
        self.model.score_pairs(self.vocab, &pairs)
    }
}

/// Memoizes another scorer per `(query, code)`; concurrent reads, serialized writes.
pub struct CachedScorer<S> {
    inner: S,
    cache: RwLock<HashMap<(String, String), f64>>,
}

impl<S: Scorer> CachedScorer<S> {
    pub fn new(inner: S) -> Self {
        Self { inner, cache: RwLock::new(HashMap::new()) }
    }

    pub fn len(&self) -> usize {
        self.cache.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<S: Scorer> Scorer for CachedScorer<S> {
    fn score(&self, query: &str, code: &str) -> f64 {
        self.score_many(query, &[code])[0]
    }

    fn score_many(&self, query: &str, codes: &[&str]) -> Vec<f64> {
        let mut out = vec![f64::NAN; codes.len()];
        let mut missing = Vec::new();
        {
            let cache = self.cache.read().expect("cache lock");
            for (i, c) in codes.iter().enumerate() {
                match cache.get(&(query.to_string(), c.to_string())) {
                    Some(&s) => out[i] = s,
                    None => missing.push(i),
                }
            }
        }
        if !missing.is_empty() {
            let todo: Vec<&str> = missing.iter().map(|&i| codes[i]).collect();
            let fresh = self.inner.score_many(query, &todo);
            let mut cache = self.cache.write().expect("cache lock");
            for (&i, s) in missing.iter().zip(fresh) {
                out[i] = s;
                cache.insert((query.to_string(), codes[i].to_string()), s);
            }
        }
        out
    }
}

/// Rank of each query's true code among all codes of the set.
pub fn rank_records<S: Scorer + ?Sized>(set: &TestSet, scorer: &S) -> Result<Vec<RankRecord>> {
    if set.entries.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let codes: Vec<&str> = set.entries.iter().map(|e| e.code.as_str()).collect();
    set.entries
        .par_iter()
        .enumerate()
        .map(|(i, entry)| {
            let scores = scorer.score_many(&entry.query, &codes);
            if scores.len() != codes.len() {
                return Err(EvalError::ScoreCount { expected: codes.len(), got: scores.len() });
            }
            if let Some(j) = scores.iter().position(|s| !s.is_finite()) {
                return Err(EvalError::NonFinite {
                    query_id: entry.id.clone(),
                    code_id: set.entries[j].id.clone(),
                    score: scores[j],
                });
            }
            let truth = scores[i];
            let rank = 1 + scores.iter().filter(|&&s| s > truth).count();
            Ok(RankRecord { query_id: entry.id.clone(), rank, true_score: truth })
        })
        .collect()
}

/// Mean of `1 / rank` over rank records.
pub fn mean_reciprocal(records: &[RankRecord]) -> f64 {
    records.iter().map(|r| 1.0 / r.rank as f64).sum::<f64>() / records.len() as f64
}

/// MRR of one set.
pub fn mrr<S: Scorer + ?Sized>(set: &TestSet, scorer: &S) -> Result<MrrResult> {
    let value = mean_reciprocal(&rank_records(set, scorer)?);
    Ok(MrrResult {
        per_set: vec![value],
        mean: value,
        n_queries: set.entries.len(),
        tie_policy: TiePolicy::StrictGreater,
    })
}

/// Unweighted mean of per-set MRR values.
pub fn mrr_mean<S: Scorer + ?Sized>(sets: &[TestSet], scorer: &S) -> Result<MrrResult> {
    if sets.is_empty() {
        return Err(EvalError::NoSets);
    }
    let per_set = sets
        .iter()
        .map(|s| mrr(s, scorer).map(|r| r.mean))
        .collect::<Result<Vec<f64>>>()?;
    let mean = per_set.iter().sum::<f64>() / per_set.len() as f64;
    Ok(MrrResult {
        per_set,
        mean,
        n_queries: sets[0].entries.len(),
        tie_policy: TiePolicy::StrictGreater,
    })
}

/// Fraction of positions where the two label vectors agree.
pub fn compute_agreement(human: &[u8], original: &[u8]) -> Result<f64> {
    if human.len() != original.len() {
        return Err(EvalError::LengthMismatch { human: human.len(), original: original.len() });
    }
    if let Some(&bad) = human.iter().chain(original).find(|&&l| l > 1) {
        return Err(EvalError::InvalidLabel(bad));
    }
    if human.is_empty() {
        return Ok(1.0);
    }
    let same = human.iter().zip(original).filter(|(a, b)| a == b).count();
    Ok(same as f64 / human.len() as f64)
}

/// MRR table with natural languages as rows and test corpora as columns.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MrrTable {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

impl MrrTable {
    pub fn set(&mut self, row: &str, column: &str, value: f64) {
        let c = match self.columns.iter().position(|x| x == column) {
            Some(c) => c,
            None => {
                self.columns.push(column.to_string());
                self.rows.iter_mut().for_each(|(_, v)| v.push(None));
                self.columns.len() - 1
            }
        };
        let r = match self.rows.iter().position(|(x, _)| x == row) {
            Some(r) => r,
            None => {
                self.rows.push((row.to_string(), vec![None; self.columns.len()]));
                self.rows.len() - 1
            }
        };
        self.rows[r].1[c] = Some(value);
    }

    pub fn write_tsv<W: Write>(&self, mut w: W, header: Option<&ArtifactHeader>) -> io::Result<()> {
        if let Some(h) = header {
            writeln!(w, "{h}")?;
        }
        writeln!(w, "nl\t{}", self.columns.join("\t"))?;
        for (name, values) in &self.rows {
            let cells: Vec<String> = values
                .iter()
                .map(|v| v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}")))
                .collect();
            writeln!(w, "{name}\t{}", cells.join("\t"))?;
        }
        Ok(())
    }
}

/// Per-query ranks as `query_id\trank\ttrue_score`.
pub fn write_rank_records<W: Write>(mut w: W, records: &[RankRecord]) -> io::Result<()> {
    writeln!(w, "query_id\trank\ttrue_score")?;
    for r in records {
        writeln!(w, "{}\t{}\t{}", r.query_id, r.rank, r.true_score)?;
    }
    Ok(())
}

/// Indices of the `top_k` best-scoring codes for `query` with their scores,
/// best first. Equal scores keep corpus order.
pub fn top_k<S: Scorer + ?Sized>(scorer: &S, query: &str, codes: &[&str], top_k: usize) -> Vec<(usize, f64)> {
    let scores = scorer.score_many(query, codes);
    let mut order: Vec<usize> = (0..codes.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]));
    order.into_iter().take(top_k).map(|i| (i, scores[i])).collect()
}

/// `H_n / n`: expected MRR of a scorer whose ranks are uniform over `1..=n`.
pub fn random_mrr_expectation(n: usize) -> f64 {
    (1..=n).map(|k| 1.0 / k as f64).sum::<f64>() / n as f64
}
