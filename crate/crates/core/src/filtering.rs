//! Back-translation quality filtering with uni-gram BLEU.
//!
//! A translated docstring is kept when the BLEU-1 score of its round trip
//! against the English original is strictly greater than the threshold.

use std::collections::HashMap;
use std::hash::Hash;
use std::io::{self, BufRead, Write};

use thiserror::Error;

use crate::artifact::{is_comment, ArtifactHeader};
use crate::corpus::{CorpusRecord, NatLang, Partition};
use crate::translation::BackTranslation;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("reference must contain at least one token")]
    EmptyReference,
    #[error("threshold {0} outside [0, 1]")]
    ThresholdOutOfRange(f64),
    #[error("thresholds must be sorted ascending, got {0:?}")]
    UnsortedThresholds(Vec<f64>),
    #[error("malformed score line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Whitespace tokenization applied before BLEU scoring.
#[derive(Debug, Clone, Copy)]
pub struct BleuTokenizer {
    pub lowercase: bool,
}

impl Default for BleuTokenizer {
    fn default() -> Self {
        Self { lowercase: true }
    }
}

impl BleuTokenizer {
    pub fn tokenize(&self, text: &str) -> Vec<String> {
        text.split_whitespace()
            .map(|t| if self.lowercase { t.to_lowercase() } else { t.to_string() })
            .collect()
    }
}

/// BLEU restricted to unigrams: clipped unigram precision times the brevity
/// penalty `min(1, exp(1 - r/c))`. No smoothing; an empty candidate scores 0.
pub fn unigram_bleu<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> Result<f64, FilterError> {
    if reference.is_empty() {
        return Err(FilterError::EmptyReference);
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let mut ref_counts: HashMap<&T, usize> = HashMap::new();
    for t in reference {
        *ref_counts.entry(t).or_default() += 1;
    }
    let mut cand_counts: HashMap<&T, usize> = HashMap::new();
    for t in candidate {
        *cand_counts.entry(t).or_default() += 1;
    }
    let clipped: usize = cand_counts
        .iter()
        .map(|(t, &n)| n.min(ref_counts.get(t).copied().unwrap_or(0)))
        .sum();
    let c = candidate.len() as f64;
    let r = reference.len() as f64;
    let precision = clipped as f64 / c;
    let brevity = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    Ok(brevity * precision)
}

/// Score a round trip against its original.
pub fn score_backtranslation(bt: &BackTranslation, tok: &BleuTokenizer) -> Result<f64, FilterError> {
    unigram_bleu(&tok.tokenize(&bt.round_trip), &tok.tokenize(&bt.original))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredRecord {
    pub record: CorpusRecord,
    pub bleu1: f64,
}

fn check_threshold(theta: f64) -> Result<(), FilterError> {
    if (0.0..=1.0).contains(&theta) {
        Ok(())
    } else {
        Err(FilterError::ThresholdOutOfRange(theta))
    }
}

/// Records whose score is strictly above `theta`, in input order.
pub fn filter_by_threshold(scored: &[ScoredRecord], theta: f64) -> Result<Vec<CorpusRecord>, FilterError> {
    check_threshold(theta)?;
    Ok(scored
        .iter()
        .filter(|s| s.bleu1 > theta)
        .map(|s| s.record.clone())
        .collect())
}

/// Scores of one (language, split) group fed into a sweep.
#[derive(Debug, Clone)]
pub struct SweepGroup {
    pub nl: NatLang,
    pub split: Partition,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportRow {
    pub nl: NatLang,
    pub split: Partition,
    /// Retained count per threshold, aligned with `FilterReport::thresholds`.
    pub retained: Vec<usize>,
}

/// Retained sizes per (language, split) across a threshold sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterReport {
    pub thresholds: Vec<f64>,
    pub rows: Vec<ReportRow>,
}

pub fn threshold_sweep(groups: &[SweepGroup], thresholds: &[f64]) -> Result<FilterReport, FilterError> {
    for &t in thresholds {
        check_threshold(t)?;
    }
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(FilterError::UnsortedThresholds(thresholds.to_vec()));
    }
    let rows = groups
        .iter()
        .map(|g| {
            let mut sorted = g.scores.clone();
            sorted.sort_by(f64::total_cmp);
            let retained = thresholds
                .iter()
                .map(|&t| sorted.len() - sorted.partition_point(|&s| s <= t))
                .collect();
            ReportRow {
                nl: g.nl,
                split: g.split,
                retained,
            }
        })
        .collect();
    Ok(FilterReport {
        thresholds: thresholds.to_vec(),
        rows,
    })
}

/// `0.2..0.7` (step 0.1), `0.2..0.7:0.05`, or a comma list `0.2,0.4`.
pub fn parse_thresholds(spec: &str) -> Result<Vec<f64>, String> {
    if let Some((lo, rest)) = spec.split_once("..") {
        let (hi, step) = match rest.split_once(':') {
            Some((hi, step)) => (hi, step),
            None => (rest, "0.1"),
        };
        let parse = |s: &str| s.trim().parse::<f64>().map_err(|e| format!("{s:?}: {e}"));
        let (lo, hi, step) = (parse(lo)?, parse(hi)?, parse(step)?);
        if step <= 0.0 || hi < lo {
            return Err(format!("bad range {spec:?}"));
        }
        let n = ((hi - lo) / step + 1e-9).floor() as usize;
        // round to the step's decimal grid so 0.1 * 3 prints as 0.3
        Ok((0..=n).map(|i| ((lo + i as f64 * step) * 1e9).round() / 1e9).collect())
    } else {
        spec.split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|e| format!("{s:?}: {e}")))
            .collect()
    }
}

impl FilterReport {
    pub fn get(&self, nl: NatLang, split: Partition, theta: f64) -> Option<usize> {
        let col = self.thresholds.iter().position(|&t| (t - theta).abs() < 1e-9)?;
        self.rows
            .iter()
            .find(|r| r.nl == nl && r.split == split)
            .map(|r| r.retained[col])
    }

    /// Tab-separated table: one row per (split, language), one column per threshold.
    pub fn write_tsv<W: Write>(&self, mut w: W, header: Option<&ArtifactHeader>) -> io::Result<()> {
        if let Some(h) = header {
            writeln!(w, "{h}")?;
        }
        write!(w, "split\tnl")?;
        for t in &self.thresholds {
            write!(w, "\t{t}")?;
        }
        writeln!(w)?;
        for r in &self.rows {
            write!(w, "{}\t{}", r.split, r.nl)?;
            for c in &r.retained {
                write!(w, "\t{c}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// Parse a table written by [`FilterReport::write_tsv`].
    pub fn read_tsv<R: BufRead>(reader: R) -> Result<Self, FilterError> {
        let mut report: Option<FilterReport> = None;
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() || is_comment(&line) {
                continue;
            }
            let bad = |message: String| FilterError::Malformed { line: idx + 1, message };
            let cells: Vec<&str> = line.split('\t').collect();
            let Some(rep) = report.as_mut() else {
                if cells.len() < 2 || cells[0] != "split" || cells[1] != "nl" {
                    return Err(bad("expected a `split<TAB>nl<TAB>...` column header".into()));
                }
                let thresholds = cells[2..]
                    .iter()
                    .map(|c| c.parse::<f64>().map_err(|e| bad(format!("threshold {c:?}: {e}"))))
                    .collect::<Result<_, _>>()?;
                report = Some(FilterReport { thresholds, rows: Vec::new() });
                continue;
            };
            if cells.len() != rep.thresholds.len() + 2 {
                return Err(bad(format!("expected {} cells, found {}", rep.thresholds.len() + 2, cells.len())));
            }
            let split = cells[0].parse().map_err(|e| bad(format!("{e}")))?;
            let nl = cells[1].parse().map_err(|e| bad(format!("{e}")))?;
            let retained = cells[2..]
                .iter()
                .map(|c| c.parse::<usize>().map_err(|e| bad(format!("count {c:?}: {e}"))))
                .collect::<Result<_, _>>()?;
            rep.rows.push(ReportRow { nl, split, retained });
        }
        report.ok_or_else(|| FilterError::Malformed { line: 0, message: "empty report".into() })
    }

    /// Cells whose relative deviation from `reference` exceeds `rel_tol`.
    /// Cells missing from either side are ignored.
    pub fn deviations(&self, reference: &FilterReport, rel_tol: f64) -> Vec<Deviation> {
        let mut out = Vec::new();
        for r in &self.rows {
            for (&theta, &got) in self.thresholds.iter().zip(&r.retained) {
                if let Some(want) = reference.get(r.nl, r.split, theta) {
                    let rel = (got as f64 - want as f64).abs() / want.max(1) as f64;
                    if rel > rel_tol {
                        out.push(Deviation {
                            nl: r.nl,
                            split: r.split,
                            theta,
                            got,
                            want,
                            rel,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Deviation {
    pub nl: NatLang,
    pub split: Partition,
    pub theta: f64,
    pub got: usize,
    pub want: usize,
    pub rel: f64,
}

pub fn write_scores<W: Write>(mut w: W, scores: &[(String, f64)], header: Option<&ArtifactHeader>) -> io::Result<()> {
    if let Some(h) = header {
        writeln!(w, "{h}")?;
    }
    writeln!(w, "id\tbleu1")?;
    for (id, s) in scores {
        writeln!(w, "{id}\t{s}")?;
    }
    Ok(())
}

pub fn read_scores<R: BufRead>(reader: R) -> Result<Vec<(String, f64)>, FilterError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || is_comment(&line) || line == "id\tbleu1" {
            continue;
        }
        let malformed = |message: String| FilterError::Malformed { line: idx + 1, message };
        let (id, score) = line
            .split_once('\t')
            .ok_or_else(|| malformed("expected id<TAB>bleu1".into()))?;
        let score: f64 = score.trim().parse().map_err(|e| malformed(format!("{e}")))?;
        if !(0.0..=1.0).contains(&score) {
            return Err(malformed(format!("score {score} outside [0, 1]")));
        }
        out.push((id.to_string(), score));
    }
    Ok(out)
}

/// Retained fine-tuning sizes for the Go split at thresholds 0.1..0.9,
/// as published for the M2M-100 back-translations.
pub mod reference {
    use super::*;

    pub const THRESHOLDS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

    pub const TRAIN: [(NatLang, [usize; 9]); 3] = [
        (NatLang::Fr, [626_130, 621_167, 613_893, 597_092, 570_891, 530_485, 391_897, 224_928, 78_989]),
        (NatLang::Ja, [621_857, 612_422, 594_477, 552_979, 480_567, 388_189, 250_028, 76_965, 27_670]),
        (NatLang::Zh, [618_904, 607_468, 588_808, 557_748, 500_622, 410_369, 265_986, 71_625, 20_173]),
    ];

    pub const VALID: [(NatLang, [usize; 9]); 3] = [
        (NatLang::Fr, [28_123, 27_881, 27_535, 26_799, 25_621, 24_000, 20_231, 11_646, 4_647]),
        (NatLang::Ja, [27_837, 27_433, 26_524, 24_901, 21_981, 16_327, 10_304, 5_422, 1_806]),
        (NatLang::Zh, [27_693, 27_115, 26_178, 24_971, 22_280, 18_445, 10_792, 4_228, 1_002]),
    ];

    pub fn go_finetune_report() -> FilterReport {
        let mut rows = Vec::new();
        for (split, table) in [(Partition::Train, &TRAIN), (Partition::Valid, &VALID)] {
            for (nl, counts) in table.iter() {
                rows.push(ReportRow {
                    nl: *nl,
                    split,
                    retained: counts.to_vec(),
                });
            }
        }
        FilterReport {
            thresholds: THRESHOLDS.to_vec(),
            rows,
        }
    }
}
