//! Docstring/code corpora: loading, pairing, test-set sampling and regime assembly.
//!
//! Record files are line-delimited JSON with the fields
//! `{id, docstring, code, pl, nl, url, partition}`; pair files carry
//! `{label, query, code, nl, pl}`. Lines starting with `#` are headers and are
//! skipped by every reader.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::{is_comment, tsv_escape, tsv_unescape, ArtifactHeader};
use crate::rng::SeededRng;

/// Default number of entries in an MRR test set.
pub const DEFAULT_TEST_SET_SIZE: usize = 1000;
/// Default number of independently sampled test sets per corpus.
pub const DEFAULT_TEST_SET_COUNT: usize = 3;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: io::Error },
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: io::Error },
    #[error("need at least {needed} records, got {got}")]
    TooFewRecords { needed: usize, got: usize },
    #[error("records mix languages: expected {expected}, found {found} in record {id}")]
    MixedLanguages {
        expected: String,
        found: String,
        id: String,
    },
    #[error("no admissible negative code for record {id}")]
    NoNegative { id: String },
    #[error("pool has only {distinct} distinct codes, test set needs {needed}")]
    NotEnoughDistinctCodes { needed: usize, distinct: usize },
    #[error("missing language group {nl}/{pl}")]
    MissingGroup { nl: NatLang, pl: ProgLang },
    #[error("invalid regime: {0}")]
    InvalidRegime(String),
    #[error("unknown language tag {0:?}")]
    UnknownTag(String),
    #[error("malformed line {line}: {message}")]
    Malformed { line: usize, message: String },
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

macro_rules! tag_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $s:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $s),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = CorpusError;
            fn from_str(s: &str) -> Result<Self> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($s => Ok($name::$variant),)+
                    _ => Err(CorpusError::UnknownTag(s.to_string())),
                }
            }
        }
    };
}

tag_enum!(
    /// Programming language of the code side.
    ProgLang { Go => "go", Python => "python", Java => "java", Php => "php" }
);
tag_enum!(
    /// Natural language of the docstring/query side.
    NatLang { En => "en", Fr => "fr", Ja => "ja", Zh => "zh" }
);
tag_enum!(Partition { Train => "train", Valid => "valid", Test => "test" });

/// One docstring/code pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub docstring: String,
    pub code: String,
    pub pl: ProgLang,
    pub nl: NatLang,
    #[serde(default)]
    pub url: String,
    pub partition: Partition,
}

/// A labelled fine-tuning instance; `label == 1` iff `query` is the docstring
/// originally paired with `code`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairExample {
    pub label: u8,
    pub query: String,
    pub code: String,
    pub nl: NatLang,
    pub pl: ProgLang,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestEntry {
    pub id: String,
    pub query: String,
    pub code: String,
}

/// Positive query/code pairs that double as each other's distractors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestSet {
    pub entries: Vec<TestEntry>,
    pub seed: u64,
}

impl TestSet {
    /// Use a pool as-is, without sampling. Rejects duplicate codes.
    pub fn from_records(records: &[CorpusRecord]) -> Result<Self> {
        let distinct: HashSet<&str> = records.iter().map(|r| r.code.as_str()).collect();
        if distinct.len() != records.len() {
            return Err(CorpusError::NotEnoughDistinctCodes {
                needed: records.len(),
                distinct: distinct.len(),
            });
        }
        Ok(Self {
            entries: records.iter().map(TestEntry::from).collect(),
            seed: 0,
        })
    }

    pub fn size(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl From<&CorpusRecord> for TestEntry {
    fn from(r: &CorpusRecord) -> Self {
        Self {
            id: r.id.clone(),
            query: r.docstring.clone(),
            code: r.code.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegimeKind {
    NoPretraining,
    AllToOne,
    AllToAll,
}

impl FromStr for RegimeKind {
    type Err = CorpusError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no-pretraining" => Ok(Self::NoPretraining),
            "all-to-one" => Ok(Self::AllToOne),
            "all-to-all" => Ok(Self::AllToAll),
            other => Err(CorpusError::InvalidRegime(format!("unknown regime {other:?}"))),
        }
    }
}

/// Which (natural, programming) language groups feed MLM pre-training.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataRegime {
    kind: RegimeKind,
    nls: Vec<NatLang>,
    pls: Vec<ProgLang>,
}

impl DataRegime {
    pub fn new(kind: RegimeKind, nls: Vec<NatLang>, pls: Vec<ProgLang>) -> Result<Self> {
        match kind {
            RegimeKind::AllToOne if pls.len() != 1 => {
                return Err(CorpusError::InvalidRegime(format!(
                    "all-to-one needs exactly one programming language, got {}",
                    pls.len()
                )))
            }
            RegimeKind::AllToAll if !ProgLang::ALL.iter().all(|p| pls.contains(p)) => {
                return Err(CorpusError::InvalidRegime(
                    "all-to-all needs every programming language".into(),
                ))
            }
            _ => {}
        }
        Ok(Self { kind, nls, pls })
    }

    pub fn no_pretraining() -> Self {
        Self {
            kind: RegimeKind::NoPretraining,
            nls: Vec::new(),
            pls: Vec::new(),
        }
    }

    pub fn all_to_one(pl: ProgLang) -> Self {
        Self {
            kind: RegimeKind::AllToOne,
            nls: NatLang::ALL.to_vec(),
            pls: vec![pl],
        }
    }

    pub fn all_to_all() -> Self {
        Self {
            kind: RegimeKind::AllToAll,
            nls: NatLang::ALL.to_vec(),
            pls: ProgLang::ALL.to_vec(),
        }
    }

    pub fn kind(&self) -> RegimeKind {
        self.kind
    }

    pub fn nls(&self) -> &[NatLang] {
        &self.nls
    }

    pub fn pls(&self) -> &[ProgLang] {
        &self.pls
    }
}

/// Records bucketed by (natural language, programming language).
#[derive(Debug, Clone, Default)]
pub struct LanguageGroups {
    groups: BTreeMap<(NatLang, ProgLang), Vec<CorpusRecord>>,
}

impl LanguageGroups {
    pub fn from_records(records: impl IntoIterator<Item = CorpusRecord>) -> Self {
        let mut groups: BTreeMap<_, Vec<_>> = BTreeMap::new();
        for r in records {
            groups.entry((r.nl, r.pl)).or_default().push(r);
        }
        Self { groups }
    }

    pub fn get(&self, nl: NatLang, pl: ProgLang) -> Option<&[CorpusRecord]> {
        self.groups.get(&(nl, pl)).map(Vec::as_slice)
    }

    pub fn insert(&mut self, nl: NatLang, pl: ProgLang, records: Vec<CorpusRecord>) {
        self.groups.insert((nl, pl), records);
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SkipReason {
    Malformed(String),
    EmptyDocstring,
    EmptyCode,
    UnexpectedLanguage(ProgLang),
    DuplicateId(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedLine {
    pub line: usize,
    pub reason: SkipReason,
}

/// Valid records plus per-line diagnostics for everything that was dropped.
#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub records: Vec<CorpusRecord>,
    pub skipped: Vec<SkippedLine>,
}

fn check_record(r: &CorpusRecord) -> Option<SkipReason> {
    if r.docstring.trim().is_empty() {
        Some(SkipReason::EmptyDocstring)
    } else if r.code.trim().is_empty() {
        Some(SkipReason::EmptyCode)
    } else {
        None
    }
}

/// Load a record file, skipping (and counting) lines that violate record invariants.
pub fn load_corpus(path: &Path, expected_pl: Option<ProgLang>) -> Result<LoadReport> {
    let file = File::open(path).map_err(|source| CorpusError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    read_corpus(BufReader::new(file), expected_pl).map_err(|source| CorpusError::Read {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_corpus<R: BufRead>(reader: R, expected_pl: Option<ProgLang>) -> io::Result<LoadReport> {
    let mut report = LoadReport::default();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = idx + 1;
        if line.trim().is_empty() || is_comment(&line) {
            continue;
        }
        let reason = match serde_json::from_str::<CorpusRecord>(&line) {
            Err(e) => Some(SkipReason::Malformed(e.to_string())),
            Ok(r) => match check_record(&r) {
                Some(reason) => Some(reason),
                None if expected_pl.is_some_and(|pl| pl != r.pl) => {
                    Some(SkipReason::UnexpectedLanguage(r.pl))
                }
                None if !seen.insert(r.id.clone()) => Some(SkipReason::DuplicateId(r.id)),
                None => {
                    report.records.push(r);
                    None
                }
            },
        };
        if let Some(reason) = reason {
            log::debug!("skipping line {line_no}: {reason:?}");
            report.skipped.push(SkippedLine {
                line: line_no,
                reason,
            });
        }
    }
    Ok(report)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| CorpusError::Write {
            path: path.to_path_buf(),
            source,
        })
}

pub fn write_jsonl<W: Write, T: Serialize>(
    mut w: W,
    items: &[T],
    header: Option<&ArtifactHeader>,
) -> io::Result<()> {
    if let Some(h) = header {
        writeln!(w, "{h}")?;
    }
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn write_corpus(
    path: &Path,
    records: &[CorpusRecord],
    header: Option<&ArtifactHeader>,
) -> Result<()> {
    write_jsonl(create(path)?, records, header).map_err(|source| CorpusError::Write {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_pairs(path: &Path, pairs: &[PairExample], header: Option<&ArtifactHeader>) -> Result<()> {
    write_jsonl(create(path)?, pairs, header).map_err(|source| CorpusError::Write {
        path: path.to_path_buf(),
        source,
    })
}

/// Read any line-delimited JSON artifact; malformed lines are fatal.
pub fn load_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|source| CorpusError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() || is_comment(&line) {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            line: idx + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Read a pair file. Unlike record files, malformed pair lines are fatal.
pub fn load_pairs(path: &Path) -> Result<Vec<PairExample>> {
    let pairs: Vec<PairExample> = load_jsonl(path)?;
    if let Some((idx, p)) = pairs.iter().enumerate().find(|(_, p)| p.label > 1) {
        return Err(CorpusError::Malformed {
            line: idx + 1,
            message: format!("label {} not in {{0,1}}", p.label),
        });
    }
    Ok(pairs)
}

/// Test sets, one JSON object per line.
pub fn write_test_sets(path: &Path, sets: &[TestSet], header: Option<&ArtifactHeader>) -> Result<()> {
    write_jsonl(create(path)?, sets, header).map_err(|source| CorpusError::Write {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_test_sets(path: &Path) -> Result<Vec<TestSet>> {
    load_jsonl(path)
}

/// Convert one line of the public CodeSearchNet jsonl release into a record.
///
/// Only `code`, `docstring`, `language`, `partition` and `url` are read; the
/// id is `<pl>-<partition>-<index>`.
pub fn parse_csn_line(line: &str, index: usize) -> Result<CorpusRecord> {
    #[derive(Deserialize)]
    struct Raw {
        code: String,
        docstring: String,
        language: String,
        #[serde(default)]
        partition: Option<String>,
        #[serde(default)]
        url: String,
    }
    let raw: Raw = serde_json::from_str(line).map_err(|e| CorpusError::Malformed {
        line: index + 1,
        message: e.to_string(),
    })?;
    let pl: ProgLang = raw.language.parse()?;
    let partition: Partition = raw.partition.as_deref().unwrap_or("train").parse().map_err(|_| {
        CorpusError::Malformed {
            line: index + 1,
            message: "unknown partition".into(),
        }
    })?;
    Ok(CorpusRecord {
        id: format!("{pl}-{partition}-{index}"),
        docstring: raw.docstring,
        code: raw.code,
        pl,
        nl: NatLang::En,
        url: raw.url,
        partition,
    })
}

/// Parse one `<CODESPLIT>`-separated fine-tuning line
/// (`label<CODESPLIT>url<CODESPLIT>name<CODESPLIT>docstring<CODESPLIT>code`).
pub fn parse_codesplit_line(line: &str, pl: ProgLang, nl: NatLang) -> Option<PairExample> {
    let fields: Vec<&str> = line.splitn(5, "<CODESPLIT>").collect();
    if fields.len() != 5 {
        return None;
    }
    let label = match fields[0].trim() {
        "1" => 1,
        "0" => 0,
        _ => return None,
    };
    Some(PairExample {
        label,
        query: fields[3].to_string(),
        code: fields[4].to_string(),
        nl,
        pl,
    })
}

/// Labelled pairs read from a `<CODESPLIT>` file.
#[derive(Debug, Clone, Default)]
pub struct CodesplitLoad {
    pub pairs: Vec<PairExample>,
    /// 1-based numbers of lines that did not parse.
    pub skipped: Vec<usize>,
}

/// Read a `<CODESPLIT>` fine-tuning file; blank lines are ignored and
/// malformed lines are skipped.
pub fn load_codesplit(path: &Path, pl: ProgLang, nl: NatLang) -> Result<CodesplitLoad> {
    let err = |source| CorpusError::Read {
        path: path.to_path_buf(),
        source,
    };
    let mut out = CodesplitLoad::default();
    for (idx, line) in BufReader::new(File::open(path).map_err(err)?).lines().enumerate() {
        let line = line.map_err(err)?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_codesplit_line(&line, pl, nl) {
            Some(p) => out.pairs.push(p),
            None => out.skipped.push(idx + 1),
        }
    }
    Ok(out)
}

fn check_monolingual(records: &[CorpusRecord]) -> Result<()> {
    let first = &records[0];
    for r in records {
        if r.pl != first.pl || r.nl != first.nl {
            return Err(CorpusError::MixedLanguages {
                expected: format!("{}/{}", first.nl, first.pl),
                found: format!("{}/{}", r.nl, r.pl),
                id: r.id.clone(),
            });
        }
    }
    Ok(())
}

const NEGATIVE_REJECTION_TRIES: usize = 32;

/// Balanced fine-tuning pairs: each record yields its positive pair followed by
/// one negative that pairs its docstring with a uniformly drawn code from a
/// different record of the same group.
///
/// A candidate is rejected if it shares the docstring or the code of the source
/// record; after a bounded number of rejections the admissible set is
/// enumerated and drawn from directly.
pub fn make_finetune_pairs(records: &[CorpusRecord], seed: u64) -> Result<Vec<PairExample>> {
    if records.len() < 2 {
        return Err(CorpusError::TooFewRecords {
            needed: 2,
            got: records.len(),
        });
    }
    check_monolingual(records)?;
    let mut rng = SeededRng::derive(seed, "finetune-negatives");
    let n = records.len();
    let admissible = |i: usize, j: usize| {
        j != i && records[j].docstring != records[i].docstring && records[j].code != records[i].code
    };
    let mut out = Vec::with_capacity(2 * n);
    for (i, rec) in records.iter().enumerate() {
        let mut pick = None;
        for _ in 0..NEGATIVE_REJECTION_TRIES {
            let mut j = rng.below(n - 1);
            if j >= i {
                j += 1;
            }
            if admissible(i, j) {
                pick = Some(j);
                break;
            }
        }
        let j = match pick {
            Some(j) => j,
            None => {
                let candidates: Vec<usize> = (0..n).filter(|&j| admissible(i, j)).collect();
                if candidates.is_empty() {
                    return Err(CorpusError::NoNegative { id: rec.id.clone() });
                }
                candidates[rng.below(candidates.len())]
            }
        };
        out.push(PairExample {
            label: 1,
            query: rec.docstring.clone(),
            code: rec.code.clone(),
            nl: rec.nl,
            pl: rec.pl,
        });
        out.push(PairExample {
            label: 0,
            query: rec.docstring.clone(),
            code: records[j].code.clone(),
            nl: rec.nl,
            pl: rec.pl,
        });
    }
    Ok(out)
}

/// Draw `k` test sets of `n` entries each. Sets are sampled independently (they
/// may overlap); within a set entries are distinct and no code appears twice.
pub fn sample_test_sets(records: &[CorpusRecord], k: usize, n: usize, seed: u64) -> Result<Vec<TestSet>> {
    if records.len() < n {
        return Err(CorpusError::TooFewRecords {
            needed: n,
            got: records.len(),
        });
    }
    let mut rng = SeededRng::derive(seed, "test-sets");
    let mut sets = Vec::with_capacity(k);
    for _ in 0..k {
        let mut order: Vec<usize> = (0..records.len()).collect();
        rng.shuffle(&mut order);
        let mut codes = HashSet::with_capacity(n);
        let mut entries = Vec::with_capacity(n);
        for idx in order {
            if entries.len() == n {
                break;
            }
            let r = &records[idx];
            // a duplicate code is rejected and the walk continues, which is
            // equivalent to redrawing that slot
            if codes.insert(r.code.as_str()) {
                entries.push(TestEntry::from(r));
            }
        }
        if entries.len() < n {
            return Err(CorpusError::NotEnoughDistinctCodes {
                needed: n,
                distinct: entries.len(),
            });
        }
        sets.push(TestSet { entries, seed });
    }
    Ok(sets)
}

/// Concatenate the language groups a regime selects, in (nl, pl) order.
pub fn assemble_pretraining(groups: &LanguageGroups, regime: &DataRegime) -> Result<Vec<CorpusRecord>> {
    let mut out = Vec::new();
    if regime.kind() == RegimeKind::NoPretraining {
        return Ok(out);
    }
    for &nl in regime.nls() {
        for &pl in regime.pls() {
            let group = groups.get(nl, pl).ok_or(CorpusError::MissingGroup { nl, pl })?;
            out.extend_from_slice(group);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditRow {
    pub row: usize,
    pub query: String,
    pub code: String,
}

/// Pairs for manual relabelling; original labels are kept apart in `answers`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditSheet {
    pub rows: Vec<AuditRow>,
    pub answers: Vec<u8>,
}

pub fn audit_sample(pairs: &[PairExample], n: usize, seed: u64) -> Result<AuditSheet> {
    if n > pairs.len() {
        return Err(CorpusError::TooFewRecords {
            needed: n,
            got: pairs.len(),
        });
    }
    let mut rng = SeededRng::derive(seed, "audit");
    let picked = rng.sample_indices(pairs.len(), n);
    let rows = picked
        .iter()
        .enumerate()
        .map(|(row, &i)| AuditRow {
            row,
            query: pairs[i].query.clone(),
            code: pairs[i].code.clone(),
        })
        .collect();
    let answers = picked.iter().map(|&i| pairs[i].label).collect();
    Ok(AuditSheet { rows, answers })
}

impl AuditSheet {
    /// Sheet columns: `row`, `query`, `code`, `human_label` (left blank).
    pub fn write_sheet<W: Write>(&self, mut w: W, header: Option<&ArtifactHeader>) -> io::Result<()> {
        if let Some(h) = header {
            writeln!(w, "{h}")?;
        }
        writeln!(w, "row\tquery\tcode\thuman_label")?;
        for r in &self.rows {
            writeln!(w, "{}\t{}\t{}\t", r.row, tsv_escape(&r.query), tsv_escape(&r.code))?;
        }
        Ok(())
    }

    pub fn write_answers<W: Write>(&self, mut w: W, header: Option<&ArtifactHeader>) -> io::Result<()> {
        if let Some(h) = header {
            writeln!(w, "{h}")?;
        }
        writeln!(w, "row\tlabel")?;
        for (row, label) in self.answers.iter().enumerate() {
            writeln!(w, "{row}\t{label}")?;
        }
        Ok(())
    }
}

/// Read the last column of a filled-in sheet (or an answer file) as labels.
pub fn read_label_column<R: BufRead>(reader: R) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut seen_columns = false;
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CorpusError::Malformed {
            line: idx + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() || is_comment(&line) {
            continue;
        }
        if !seen_columns {
            seen_columns = true;
            continue;
        }
        let last = tsv_unescape(line.rsplit('\t').next().unwrap_or_default());
        let label = match last.trim() {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(CorpusError::Malformed {
                    line: idx + 1,
                    message: format!("label {other:?} not in {{0,1}}"),
                })
            }
        };
        out.push(label);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn rec(id: &str, doc: &str, code: &str) -> CorpusRecord {
        CorpusRecord {
            id: id.into(),
            docstring: doc.into(),
            code: code.into(),
            pl: ProgLang::Go,
            nl: NatLang::En,
            url: String::new(),
            partition: Partition::Train,
        }
    }

    fn records(n: usize) -> Vec<CorpusRecord> {
        (0..n)
            .map(|i| rec(&format!("r{i}"), &format!("doc {i}"), &format!("func f{i}() {{}}")))
            .collect()
    }

    fn jsonl(records: &[CorpusRecord]) -> String {
        let mut buf = Vec::new();
        write_jsonl(&mut buf, records, None).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn loads_three_line_fixture() {
        let text = jsonl(&records(3));
        let report = read_corpus(text.as_bytes(), None).unwrap();
        assert_eq!(report.records, records(3));
        assert!(report.skipped.is_empty());
    }

    #[test]
    fn empty_docstring_is_skipped() {
        let mut rs = records(3);
        rs[1].docstring = "   ".into();
        let report = read_corpus(jsonl(&rs).as_bytes(), None).unwrap();
        assert_eq!(report.records.len(), 2);
        assert_eq!(report.skipped.len(), 1);
        assert_eq!(report.skipped[0].reason, SkipReason::EmptyDocstring);
        assert_eq!(report.skipped[0].line, 2);
    }

    #[test]
    fn malformed_and_duplicate_lines_are_counted() {
        let mut text = jsonl(&records(2));
        text.push_str("{not json}\n");
        text.push_str(r#"{"id":"x","docstring":"d","code":"c","pl":"ruby","nl":"en","partition":"train"}"#);
        text.push('\n');
        text.push_str(&jsonl(&records(1)));
        let report = read_corpus(text.as_bytes(), None).unwrap();
        assert_eq!(report.records.len(), 2);
        assert_eq!(report.skipped.len(), 3);
        assert!(matches!(report.skipped[2].reason, SkipReason::DuplicateId(_)));
    }

    #[test]
    fn expected_pl_filters() {
        let mut rs = records(3);
        rs[0].pl = ProgLang::Java;
        let report = read_corpus(jsonl(&rs).as_bytes(), Some(ProgLang::Go)).unwrap();
        assert_eq!(report.records.len(), 2);
        assert_eq!(
            report.skipped[0].reason,
            SkipReason::UnexpectedLanguage(ProgLang::Java)
        );
    }

    #[test]
    fn header_lines_are_ignored() {
        let h = ArtifactHeader::new("abc", 1);
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &records(2), Some(&h)).unwrap();
        let report = read_corpus(buf.as_slice(), None).unwrap();
        assert_eq!(report.records.len(), 2);
        assert!(report.skipped.is_empty());
    }

    #[test]
    fn field_names_are_exact() {
        let v = serde_json::to_value(&records(1)[0]).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["code", "docstring", "id", "nl", "partition", "pl", "url"]);
        let p = PairExample {
            label: 1,
            query: "q".into(),
            code: "c".into(),
            nl: NatLang::Ja,
            pl: ProgLang::Php,
        };
        assert_eq!(
            serde_json::to_string(&p).unwrap(),
            r#"{"label":1,"query":"q","code":"c","nl":"ja","pl":"php"}"#
        );
    }

    #[test]
    fn ten_records_give_balanced_pairs() {
        let pairs = make_finetune_pairs(&records(10), 7).unwrap();
        assert_eq!(pairs.len(), 20);
        assert_eq!(pairs.iter().filter(|p| p.label == 1).count(), 10);
        let again = make_finetune_pairs(&records(10), 7).unwrap();
        assert_eq!(serde_json::to_string(&pairs).unwrap(), serde_json::to_string(&again).unwrap());
    }

    #[test]
    fn two_records_negatives_are_the_crossed_pairs() {
        let rs = records(2);
        // enumerate every (query, code) combination and keep the non-matching ones
        let mut expected = Vec::new();
        for (i, q) in rs.iter().enumerate() {
            for (j, c) in rs.iter().enumerate() {
                if i != j {
                    expected.push((q.docstring.clone(), c.code.clone()));
                }
            }
        }
        let got: Vec<_> = make_finetune_pairs(&rs, 123)
            .unwrap()
            .into_iter()
            .filter(|p| p.label == 0)
            .map(|p| (p.query, p.code))
            .collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn pairs_need_two_records_and_one_language() {
        assert!(matches!(
            make_finetune_pairs(&records(1), 0),
            Err(CorpusError::TooFewRecords { .. })
        ));
        let mut rs = records(3);
        rs[2].nl = NatLang::Fr;
        assert!(matches!(
            make_finetune_pairs(&rs, 0),
            Err(CorpusError::MixedLanguages { .. })
        ));
    }

    #[test]
    fn negatives_avoid_identical_docstrings() {
        let mut rs = records(6);
        for r in rs.iter_mut().take(5) {
            r.docstring = "same".into();
        }
        let pairs = make_finetune_pairs(&rs, 11).unwrap();
        for (i, p) in pairs.iter().enumerate().filter(|(_, p)| p.label == 0) {
            let src = &rs[i / 2];
            let owner = rs.iter().find(|r| r.code == p.code).unwrap();
            assert_ne!(owner.docstring, src.docstring);
        }
        let all_same: Vec<_> = (0..3).map(|i| rec(&i.to_string(), "d", &format!("c{i}"))).collect();
        assert!(matches!(
            make_finetune_pairs(&all_same, 0),
            Err(CorpusError::NoNegative { .. })
        ));
    }

    #[test]
    fn test_set_sizes() {
        let rs = records(1500);
        let sets = sample_test_sets(&rs, 3, 1000, 5).unwrap();
        assert_eq!(sets.len(), 3);
        assert!(sets.iter().all(|s| s.size() == 1000));
        assert!(matches!(
            sample_test_sets(&records(10), 1, 11, 0),
            Err(CorpusError::TooFewRecords { .. })
        ));
    }

    #[test]
    fn exhaustive_test_set_is_a_permutation() {
        let rs = records(50);
        let set = &sample_test_sets(&rs, 1, 50, 9).unwrap()[0];
        let mut ids: Vec<_> = set.entries.iter().map(|e| e.id.clone()).collect();
        ids.sort();
        let mut want: Vec<_> = rs.iter().map(|r| r.id.clone()).collect();
        want.sort();
        assert_eq!(ids, want);
    }

    #[test]
    fn test_sets_skip_duplicate_codes() {
        let mut rs = records(30);
        for r in rs.iter_mut().take(10) {
            r.code = "dup".into();
        }
        let set = &sample_test_sets(&rs, 1, 21, 2).unwrap()[0];
        let codes: HashSet<_> = set.entries.iter().map(|e| &e.code).collect();
        assert_eq!(codes.len(), 21);
        assert!(matches!(
            sample_test_sets(&rs, 1, 22, 2),
            Err(CorpusError::NotEnoughDistinctCodes { .. })
        ));
    }

    #[test]
    fn seeds_change_test_sets() {
        let rs = records(200);
        let a = sample_test_sets(&rs, 1, 100, 1).unwrap();
        let b = sample_test_sets(&rs, 1, 100, 2).unwrap();
        assert_ne!(a[0].entries, b[0].entries);
        assert_eq!(a, sample_test_sets(&rs, 1, 100, 1).unwrap());
    }

    fn grouped() -> LanguageGroups {
        let mut all = Vec::new();
        for (k, &nl) in NatLang::ALL.iter().enumerate() {
            for (m, &pl) in ProgLang::ALL.iter().enumerate() {
                for i in 0..(1 + k + 2 * m) {
                    let mut r = rec(&format!("{nl}{pl}{i}"), "d", "c");
                    r.nl = nl;
                    r.pl = pl;
                    all.push(r);
                }
            }
        }
        LanguageGroups::from_records(all)
    }

    #[test]
    fn regimes_select_groups() {
        let g = grouped();
        assert!(assemble_pretraining(&g, &DataRegime::no_pretraining()).unwrap().is_empty());
        let one = assemble_pretraining(&g, &DataRegime::all_to_one(ProgLang::Java)).unwrap();
        assert!(one.iter().all(|r| r.pl == ProgLang::Java));
        assert_eq!(one.len(), (1 + 4) + (2 + 4) + (3 + 4) + (4 + 4));
        let all = assemble_pretraining(&g, &DataRegime::all_to_all()).unwrap();
        let sum: usize = ProgLang::ALL
            .iter()
            .map(|&pl| assemble_pretraining(&g, &DataRegime::all_to_one(pl)).unwrap().len())
            .sum();
        assert_eq!(all.len(), sum);
    }

    #[test]
    fn missing_group_is_named() {
        let g = LanguageGroups::from_records(records(3));
        let err = assemble_pretraining(&g, &DataRegime::all_to_one(ProgLang::Go)).unwrap_err();
        assert_eq!(err.to_string(), "missing language group fr/go");
    }

    #[test]
    fn regime_validation() {
        assert!(DataRegime::new(RegimeKind::AllToOne, NatLang::ALL.to_vec(), vec![]).is_err());
        assert!(DataRegime::new(RegimeKind::AllToAll, NatLang::ALL.to_vec(), vec![ProgLang::Go]).is_err());
        assert!(DataRegime::new(RegimeKind::AllToOne, NatLang::ALL.to_vec(), vec![ProgLang::Go]).is_ok());
    }

    #[test]
    fn audit_sheets() {
        let pairs = make_finetune_pairs(&records(40), 3).unwrap();
        let sheet = audit_sample(&pairs, 45, 8).unwrap();
        assert_eq!(sheet.rows.len(), 45);
        assert_eq!(sheet, audit_sample(&pairs, 45, 8).unwrap());
        assert!(audit_sample(&pairs, 0, 8).unwrap().rows.is_empty());
        assert!(audit_sample(&pairs, 81, 8).is_err());

        let mut buf = Vec::new();
        sheet.write_sheet(&mut buf, None).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 46);
        assert!(text.lines().skip(1).all(|l| l.ends_with('\t')));
        // labels never leak into the sheet
        assert!(!text.lines().next().unwrap().contains("\tlabel"));

        let mut ans = Vec::new();
        sheet.write_answers(&mut ans, Some(&ArtifactHeader::new("abc", 1))).unwrap();
        assert_eq!(read_label_column(ans.as_slice()).unwrap(), sheet.answers);
    }

    #[test]
    fn csn_and_codesplit_lines() {
        let line = r#"{"repo":"r","path":"p","func_name":"f","original_string":"x","language":"go","code":"func f() {}","code_tokens":[],"docstring":"f does things","docstring_tokens":[],"sha":"s","url":"https://x","partition":"test"}"#;
        let r = parse_csn_line(line, 4).unwrap();
        assert_eq!(r.id, "go-test-4");
        assert_eq!(r.partition, Partition::Test);
        let p = parse_codesplit_line(
            "1<CODESPLIT>https://u<CODESPLIT>F<CODESPLIT>SetStatus sets it .<CODESPLIT>func F() {}",
            ProgLang::Go,
            NatLang::En,
        )
        .unwrap();
        assert_eq!(p.label, 1);
        assert_eq!(p.query, "SetStatus sets it .");
        assert!(parse_codesplit_line("garbage", ProgLang::Go, NatLang::En).is_none());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.txt");
        std::fs::write(
            &path,
            "1<CODESPLIT>u<CODESPLIT>F<CODESPLIT>doc a<CODESPLIT>func a() {}\n\nbad line\n0<CODESPLIT>u<CODESPLIT>G<CODESPLIT>doc b<CODESPLIT>func b() {}\n",
        )
        .unwrap();
        let load = load_codesplit(&path, ProgLang::Go, NatLang::En).unwrap();
        assert_eq!(load.pairs.len(), 2);
        assert_eq!(load.skipped, vec![3]);
        assert_eq!(load.pairs[1].label, 0);
    }
}
