//! Forward and back-translation of docstrings through a pluggable translator.
//!
//! The neural MT system is an external service reached through [`Translator`].
//! [`HttpTranslator`] speaks a small JSON protocol:
//!
//! ```text
//! POST <endpoint>
//! {"texts": [..], "source_lang": "en", "target_lang": "ja", "beam_size": 3}
//! -> {"translations": [..]}
//! ```
//!
//! Every translation is written through a [`TranslationCache`] keyed on
//! `(text, source, target, beam_size)`, so reruns only hit the backend for
//! texts it has not seen.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{CorpusRecord, NatLang};

pub const DEFAULT_BEAM_SIZE: usize = 3;
pub const DEFAULT_BATCH_SIZE: usize = 32;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("backend rejected request: {0}")]
    Rejected(String),
}

#[derive(Debug, Error)]
pub enum TranslateError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("{failed} of {total} texts failed to translate; first error: {first}")]
    Incomplete {
        failed: usize,
        total: usize,
        first: BackendError,
    },
    #[error("record {id} has language {nl}, expected en")]
    NotEnglish { id: String, nl: NatLang },
    #[error("cache file {path}: {source}")]
    Cache { path: PathBuf, source: io::Error },
}

/// A machine translation backend. Implementations must return exactly one
/// output per input, in input order.
pub trait Translator: Send + Sync {
    fn translate(
        &self,
        texts: &[String],
        source: NatLang,
        target: NatLang,
        beam_size: usize,
    ) -> Result<Vec<String>, BackendError>;
}

/// Wire body for one backend call; also the validated unit of work for
/// [`translate_batch`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranslationRequest {
    pub texts: Vec<String>,
    pub source_lang: NatLang,
    pub target_lang: NatLang,
    pub beam_size: usize,
}

impl TranslationRequest {
    pub fn new(texts: Vec<String>, source_lang: NatLang, target_lang: NatLang) -> Self {
        Self {
            texts,
            source_lang,
            target_lang,
            beam_size: DEFAULT_BEAM_SIZE,
        }
    }

    pub fn validate(&self) -> Result<(), TranslateError> {
        if self.source_lang == self.target_lang {
            return Err(TranslateError::InvalidRequest(format!(
                "source and target are both {}",
                self.source_lang
            )));
        }
        if self.texts.is_empty() {
            return Err(TranslateError::InvalidRequest("no texts".into()));
        }
        if self.beam_size == 0 {
            return Err(TranslateError::InvalidRequest("beam size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TranslationResponse {
    pub translations: Vec<String>,
}

/// Client for the JSON-over-HTTP translation protocol.
pub struct HttpTranslator {
    endpoint: String,
    agent: ureq::Agent,
}

impl HttpTranslator {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            agent,
        }
    }
}

impl Translator for HttpTranslator {
    fn translate(
        &self,
        texts: &[String],
        source: NatLang,
        target: NatLang,
        beam_size: usize,
    ) -> Result<Vec<String>, BackendError> {
        let body = TranslationRequest {
            texts: texts.to_vec(),
            source_lang: source,
            target_lang: target,
            beam_size,
        };
        let mut resp = self.agent.post(&self.endpoint).send_json(&body).map_err(|e| match e {
            ureq::Error::StatusCode(code) => BackendError::Rejected(format!("HTTP {code}")),
            other => BackendError::Transport(other.to_string()),
        })?;
        let parsed: TranslationResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| BackendError::Protocol(e.to_string()))?;
        Ok(parsed.translations)
    }
}

/// Content hash of one translation unit.
pub fn cache_key(text: &str, source: NatLang, target: NatLang, beam_size: usize) -> String {
    let mut h = Sha256::new();
    // length-prefix every field so no two distinct tuples share a preimage
    for field in [text, source.as_str(), target.as_str()] {
        h.update((field.len() as u64).to_le_bytes());
        h.update(field.as_bytes());
    }
    h.update((beam_size as u64).to_le_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheLine {
    key: String,
    value: String,
}

/// Translation cache with concurrent reads and serialized writes, optionally
/// persisted as an append-only jsonl file of `{key, value}` lines.
#[derive(Default)]
pub struct TranslationCache {
    entries: RwLock<HashMap<String, String>>,
    log: Option<(PathBuf, Mutex<BufWriter<File>>)>,
}

impl TranslationCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Open (or create) a persisted cache. Later lines win over earlier ones.
    pub fn open(path: &Path) -> Result<Self, TranslateError> {
        let err = |source| TranslateError::Cache {
            path: path.to_path_buf(),
            source,
        };
        let mut entries = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(err)?);
            for line in reader.lines() {
                let line = line.map_err(err)?;
                if line.trim().is_empty() || line.starts_with('#') {
                    continue;
                }
                match serde_json::from_str::<CacheLine>(&line) {
                    Ok(l) => {
                        entries.insert(l.key, l.value);
                    }
                    // a torn final line from an interrupted run
                    Err(e) => log::warn!("ignoring bad cache line in {}: {e}", path.display()),
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(err)?;
        Ok(Self {
            entries: RwLock::new(entries),
            log: Some((path.to_path_buf(), Mutex::new(BufWriter::new(file)))),
        })
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.entries.read().unwrap().get(key).cloned()
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.read().unwrap().contains_key(key)
    }

    pub fn insert(&self, key: String, value: String) -> Result<(), TranslateError> {
        if let Some((path, log)) = &self.log {
            let mut w = log.lock().unwrap();
            let line = serde_json::to_string(&CacheLine {
                key: key.clone(),
                value: value.clone(),
            })
            .expect("cache line serializes");
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(|source| TranslateError::Cache {
                    path: path.clone(),
                    source,
                })?;
        }
        self.entries.write().unwrap().insert(key, value);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct BatchOptions {
    /// Texts per backend call.
    pub batch_size: usize,
    /// Attempts per backend call before the texts are marked failed.
    pub max_attempts: usize,
    /// Delay before the first retry; doubles on each further retry.
    pub retry_delay: Duration,
    /// Backend calls in flight at once.
    pub concurrency: usize,
}

impl Default for BatchOptions {
    fn default() -> Self {
        Self {
            batch_size: DEFAULT_BATCH_SIZE,
            max_attempts: 3,
            retry_delay: Duration::from_millis(200),
            concurrency: 4,
        }
    }
}

/// Per-text translation results, in input order.
#[derive(Debug, Clone)]
pub struct BatchResult {
    pub outputs: Vec<Result<String, BackendError>>,
    /// Backend calls made, retries included.
    pub backend_calls: usize,
}

impl BatchResult {
    pub fn failed(&self) -> usize {
        self.outputs.iter().filter(|o| o.is_err()).count()
    }

    /// Abort policy: every text must have translated.
    pub fn into_strict(self) -> Result<Vec<String>, TranslateError> {
        let total = self.outputs.len();
        let failed = self.failed();
        let mut out = Vec::with_capacity(total);
        for o in self.outputs {
            match o {
                Ok(s) => out.push(s),
                Err(first) => return Err(TranslateError::Incomplete { failed, total, first }),
            }
        }
        Ok(out)
    }
}

fn call_with_retry(
    backend: &dyn Translator,
    texts: &[String],
    req: &TranslationRequest,
    opts: &BatchOptions,
    calls: &AtomicUsize,
) -> Result<Vec<String>, BackendError> {
    let mut delay = opts.retry_delay;
    let mut last = None;
    for attempt in 0..opts.max_attempts.max(1) {
        if attempt > 0 {
            thread::sleep(delay);
            delay *= 2;
        }
        calls.fetch_add(1, Ordering::Relaxed);
        match backend.translate(texts, req.source_lang, req.target_lang, req.beam_size) {
            Ok(out) if out.len() == texts.len() => return Ok(out),
            Ok(out) => {
                last = Some(BackendError::Protocol(format!(
                    "sent {} texts, received {}",
                    texts.len(),
                    out.len()
                )))
            }
            Err(e) => {
                log::warn!("translation attempt {} failed: {e}", attempt + 1);
                last = Some(e);
            }
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Translate every text of `req`, consulting and filling `cache`.
///
/// Only distinct uncached texts reach the backend, in chunks of
/// `opts.batch_size` with at most `opts.concurrency` chunks in flight. A chunk
/// that still fails after `opts.max_attempts` marks each of its texts with the
/// last error; the caller decides whether to skip those or abort via
/// [`BatchResult::into_strict`].
pub fn translate_batch(
    req: &TranslationRequest,
    backend: &dyn Translator,
    cache: &TranslationCache,
    opts: &BatchOptions,
) -> Result<BatchResult, TranslateError> {
    req.validate()?;
    let keys: Vec<String> = req
        .texts
        .iter()
        .map(|t| cache_key(t, req.source_lang, req.target_lang, req.beam_size))
        .collect();

    let mut pending: Vec<usize> = Vec::new();
    let mut queued = HashMap::new();
    for (i, key) in keys.iter().enumerate() {
        if !cache.contains(key) && !queued.contains_key(key.as_str()) {
            queued.insert(key.as_str(), i);
            pending.push(i);
        }
    }

    let chunks: Vec<&[usize]> = pending.chunks(opts.batch_size.max(1)).collect();
    let failures: Mutex<HashMap<String, BackendError>> = Mutex::new(HashMap::new());
    let calls = AtomicUsize::new(0);
    let next_chunk = AtomicUsize::new(0);
    let insert_error: Mutex<Option<TranslateError>> = Mutex::new(None);

    let workers = opts.concurrency.max(1).min(chunks.len());
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let c = next_chunk.fetch_add(1, Ordering::Relaxed);
                let Some(chunk) = chunks.get(c) else { break };
                let texts: Vec<String> = chunk.iter().map(|&i| req.texts[i].clone()).collect();
                match call_with_retry(backend, &texts, req, opts, &calls) {
                    Ok(out) => {
                        for (&i, translated) in chunk.iter().zip(out) {
                            if let Err(e) = cache.insert(keys[i].clone(), translated) {
                                insert_error.lock().unwrap().get_or_insert(e);
                            }
                        }
                    }
                    Err(e) => {
                        let mut f = failures.lock().unwrap();
                        for &i in chunk.iter() {
                            f.insert(keys[i].clone(), e.clone());
                        }
                    }
                }
            });
        }
    });

    if let Some(e) = insert_error.into_inner().unwrap() {
        return Err(e);
    }
    let failures = failures.into_inner().unwrap();
    let outputs = keys
        .iter()
        .map(|k| match cache.get(k) {
            Some(v) => Ok(v),
            None => Err(failures
                .get(k)
                .cloned()
                .unwrap_or_else(|| BackendError::Protocol("missing translation".into()))),
        })
        .collect();
    Ok(BatchResult {
        outputs,
        backend_calls: calls.into_inner(),
    })
}

/// Original English text, its pivot translation, and the translation back.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackTranslation {
    pub id: String,
    pub pivot_lang: NatLang,
    pub original: String,
    pub pivot: String,
    pub round_trip: String,
}

#[derive(Debug, Clone, Default)]
pub struct BacktranslationOutcome {
    pub triples: Vec<BackTranslation>,
    /// Records whose forward or backward leg failed, with the error.
    pub failed: Vec<(String, BackendError)>,
}

/// Round-trip English docstrings through `pivot`. Failed records are reported
/// in `failed` rather than aborting the run.
pub fn backtranslate_corpus(
    records: &[CorpusRecord],
    pivot: NatLang,
    backend: &dyn Translator,
    cache: &TranslationCache,
    opts: &BatchOptions,
    beam_size: usize,
) -> Result<BacktranslationOutcome, TranslateError> {
    if let Some(r) = records.iter().find(|r| r.nl != NatLang::En) {
        return Err(TranslateError::NotEnglish {
            id: r.id.clone(),
            nl: r.nl,
        });
    }
    let mut outcome = BacktranslationOutcome::default();
    if records.is_empty() {
        return Ok(outcome);
    }
    let forward = translate_batch(
        &TranslationRequest {
            texts: records.iter().map(|r| r.docstring.clone()).collect(),
            source_lang: NatLang::En,
            target_lang: pivot,
            beam_size,
        },
        backend,
        cache,
        opts,
    )?;

    let mut ok: Vec<(&CorpusRecord, String)> = Vec::new();
    for (r, out) in records.iter().zip(forward.outputs) {
        match out {
            Ok(p) => ok.push((r, p)),
            Err(e) => outcome.failed.push((r.id.clone(), e)),
        }
    }
    if ok.is_empty() {
        return Ok(outcome);
    }
    let backward = translate_batch(
        &TranslationRequest {
            texts: ok.iter().map(|(_, p)| p.clone()).collect(),
            source_lang: pivot,
            target_lang: NatLang::En,
            beam_size,
        },
        backend,
        cache,
        opts,
    )?;
    for ((r, p), back) in ok.into_iter().zip(backward.outputs) {
        match back {
            Ok(round_trip) => outcome.triples.push(BackTranslation {
                id: r.id.clone(),
                pivot_lang: pivot,
                original: r.docstring.clone(),
                pivot: p,
                round_trip,
            }),
            Err(e) => outcome.failed.push((r.id.clone(), e)),
        }
    }
    Ok(outcome)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoverageRow {
    pub source: NatLang,
    pub target: NatLang,
    pub cached: usize,
    pub missing: usize,
}

/// How many docstrings already have a cached translation, per language pair.
pub fn translation_coverage_report(
    records: &[CorpusRecord],
    cache: &TranslationCache,
    targets: &[NatLang],
    beam_size: usize,
) -> Vec<CoverageRow> {
    let mut rows: BTreeMap<(NatLang, NatLang), CoverageRow> = BTreeMap::new();
    for r in records {
        for &target in targets.iter().filter(|&&t| t != r.nl) {
            let row = rows.entry((r.nl, target)).or_insert(CoverageRow {
                source: r.nl,
                target,
                cached: 0,
                missing: 0,
            });
            if cache.contains(&cache_key(&r.docstring, r.nl, target, beam_size)) {
                row.cached += 1;
            } else {
                row.missing += 1;
            }
        }
    }
    rows.into_values().collect()
}

/// Deterministic stand-in translators for tests and offline runs.
pub mod mock {
    use super::*;

    fn lang_offset(l: NatLang) -> u8 {
        match l {
            NatLang::En => 0,
            NatLang::Fr => 1,
            NatLang::Ja => 2,
            NatLang::Zh => 3,
        }
    }

    /// Rotate ASCII letters by the offset between the two languages.
    pub fn rotate(text: &str, source: NatLang, target: NatLang) -> String {
        let shift = (26 + lang_offset(target) - lang_offset(source)) % 26;
        text.chars()
            .map(|c| match c {
                'a'..='z' => (b'a' + (c as u8 - b'a' + shift) % 26) as char,
                'A'..='Z' => (b'A' + (c as u8 - b'A' + shift) % 26) as char,
                c => c,
            })
            .collect()
    }

    /// Drop every 5th whitespace token (1-based positions 5, 10, ...) and
    /// rejoin with single spaces.
    pub fn drop_every_fifth(text: &str) -> String {
        text.split_whitespace()
            .enumerate()
            .filter(|(i, _)| (i + 1) % 5 != 0)
            .map(|(_, t)| t)
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Letter rotation keyed on the language pair; a round trip through any
    /// pivot reproduces the input exactly.
    #[derive(Debug, Default)]
    pub struct ReversibleMock {
        calls: AtomicUsize,
    }

    impl ReversibleMock {
        pub fn new() -> Self {
            Self::default()
        }

        pub fn calls(&self) -> usize {
            self.calls.load(Ordering::Relaxed)
        }
    }

    impl Translator for ReversibleMock {
        fn translate(
            &self,
            texts: &[String],
            source: NatLang,
            target: NatLang,
            _beam_size: usize,
        ) -> Result<Vec<String>, BackendError> {
            self.calls.fetch_add(1, Ordering::Relaxed);
            Ok(texts.iter().map(|t| rotate(t, source, target)).collect())
        }
    }

    /// Like [`ReversibleMock`] but every call also drops every 5th token, so
    /// a round trip loses tokens on both legs.
    #[derive(Debug, Default)]
    pub struct LossyMock {
        calls: AtomicUsize,
    }

    impl LossyMock {
        pub fn new() -> Self {
            Self::default()
        }

        pub fn calls(&self) -> usize {
            self.calls.load(Ordering::Relaxed)
        }
    }

    impl Translator for LossyMock {
        fn translate(
            &self,
            texts: &[String],
            source: NatLang,
            target: NatLang,
            _beam_size: usize,
        ) -> Result<Vec<String>, BackendError> {
            self.calls.fetch_add(1, Ordering::Relaxed);
            Ok(texts
                .iter()
                .map(|t| rotate(&drop_every_fifth(t), source, target))
                .collect())
        }
    }

    /// Fixed phrase table; unknown texts are rejected.
    #[derive(Debug, Default)]
    pub struct Phrasebook {
        table: HashMap<(NatLang, NatLang, String), String>,
    }

    impl Phrasebook {
        pub fn with(mut self, source: NatLang, target: NatLang, text: &str, translation: &str) -> Self {
            self.table
                .insert((source, target, text.to_string()), translation.to_string());
            self
        }
    }

    impl Translator for Phrasebook {
        fn translate(
            &self,
            texts: &[String],
            source: NatLang,
            target: NatLang,
            _beam_size: usize,
        ) -> Result<Vec<String>, BackendError> {
            texts
                .iter()
                .map(|t| {
                    self.table
                        .get(&(source, target, t.clone()))
                        .cloned()
                        .ok_or_else(|| BackendError::Rejected(format!("no entry for {t:?}")))
                })
                .collect()
        }
    }
}
