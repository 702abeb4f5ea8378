//! Command-line pipeline: one subcommand per stage.
//!
//! Every subcommand accepts `--config <file>`, a plain `key = value` file whose
//! keys are the subcommand's long flag names (`batch-size` or `batch_size`).
//! Config values are applied first and explicit flags override them. Each run
//! logs its config hash and seed, and stamps both into every artifact header.
//! Output locations are not part of the hash, so rerunning a stage into a
//! different directory reproduces byte-identical artifacts.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::artifact::{config_hash, ArtifactHeader};
use crate::corpus::{
    self, assemble_pretraining, load_corpus, load_jsonl, load_test_sets, make_finetune_pairs, parse_csn_line,
    sample_test_sets, write_corpus, write_jsonl, write_pairs, write_test_sets, CorpusRecord, DataRegime,
    LanguageGroups, NatLang, Partition, ProgLang, RegimeKind,
};
use crate::eval::{mrr_mean, rank_records, top_k, write_rank_records, ModelScorer, MrrTable, OracleScorer, RandomScorer, Scorer};
use crate::filtering::{
    filter_by_threshold, parse_thresholds, read_scores, reference, score_backtranslation, threshold_sweep,
    write_scores, BleuTokenizer, FilterReport, ScoredRecord, SweepGroup,
};
use crate::model::{finetune_pairs, pretrain_mlm, write_loss_curve, EncoderConfig, EncoderModel, TrainConfig};
use crate::tokenizer::{Vocabulary, DEFAULT_MAX_LEN, DEFAULT_VOCAB_SIZE};
use crate::translation::{
    backtranslate_corpus, mock, translate_batch, translation_coverage_report, BackTranslation, BatchOptions,
    HttpTranslator, TranslationCache, TranslationRequest, Translator,
};

/// Exit status for a failed stage.
pub const EXIT_FAILURE: i32 = 1;
/// Exit status for a usage error.
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "codesearch", version, about = "Multilingual code search pipeline", args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load a corpus, drop invalid records, and optionally derive pairs, test sets and an audit sheet.
    Ingest(IngestArgs),
    /// Translate docstrings into another language.
    Translate(TranslateArgs),
    /// Round-trip English docstrings through a pivot language.
    Backtranslate(BacktranslateArgs),
    /// Score back-translations with uni-gram BLEU, sweep thresholds, and filter.
    Filter(FilterArgs),
    /// Train a vocabulary and pre-train the encoder with masked language modelling.
    Pretrain(PretrainArgs),
    /// Fine-tune the relevance head on labelled pairs.
    Finetune(FinetuneArgs),
    /// Mean reciprocal rank over test sets.
    Evaluate(EvaluateArgs),
    /// Rank a corpus's code against one free-text query.
    Search(SearchArgs),
    /// Build a threshold report from a BLEU score file.
    SweepReport(SweepReportArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct Common {
    /// Key/value config file; explicit flags take precedence.
    #[arg(long, global = true)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    /// Record files written by this tool.
    Records,
    /// CodeSearchNet release jsonl.
    Csn,
    /// `<CODESPLIT>` fine-tuning pairs; `--pairs-out` keeps their labels.
    Codesplit,
}

#[derive(Debug, Args, Serialize)]
pub struct IngestArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value_t = InputFormat::Records)]
    pub format: InputFormat,
    /// Skip records of any other programming language.
    #[arg(long)]
    pub pl: Option<ProgLang>,
    #[arg(long)]
    #[serde(skip)]
    pub output: PathBuf,
    /// Write balanced fine-tuning pairs built from the train partition.
    #[arg(long)]
    #[serde(skip)]
    pub pairs_out: Option<PathBuf>,
    /// Write test sets sampled from the test partition.
    #[arg(long)]
    #[serde(skip)]
    pub test_sets_out: Option<PathBuf>,
    #[arg(long, default_value_t = corpus::DEFAULT_TEST_SET_COUNT)]
    pub k: usize,
    #[arg(long, default_value_t = corpus::DEFAULT_TEST_SET_SIZE)]
    pub n: usize,
    /// Write an annotation sheet of this many pairs (needs --pairs-out).
    #[arg(long)]
    pub audit: Option<usize>,
    #[arg(long)]
    #[serde(skip)]
    pub audit_out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct BackendArgs {
    /// `mock-reversible`, `mock-lossy`, or an HTTP endpoint URL.
    #[arg(long, default_value = "mock-reversible")]
    pub backend: String,
    /// Append-only translation cache file.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub beam_size: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 4)]
    pub concurrency: usize,
    #[arg(long, default_value_t = 3)]
    pub max_attempts: usize,
    #[arg(long, default_value_t = 60)]
    pub timeout_secs: u64,
    /// Abort the stage if any text fails to translate instead of skipping it.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct TranslateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    pub backend: BackendArgs,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub target: NatLang,
    #[arg(long)]
    #[serde(skip)]
    pub output: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct BacktranslateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    pub backend: BackendArgs,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub pivot: NatLang,
    #[arg(long)]
    #[serde(skip)]
    pub output: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct FilterArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Back-translation triples.
    #[arg(long)]
    pub triples: PathBuf,
    /// English records the triples came from (supplies partitions).
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long, default_value = "0.2..0.7")]
    pub thresholds: String,
    #[arg(long)]
    #[serde(skip)]
    pub report: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub scores_out: Option<PathBuf>,
    /// Keep pivot-language records scoring above this threshold.
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long)]
    #[serde(skip)]
    pub output: Option<PathBuf>,
    /// Case-sensitive BLEU tokenization.
    #[arg(long)]
    pub keep_case: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepReportArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// `id<TAB>bleu1` score file.
    #[arg(long, required = true)]
    pub scores: Vec<PathBuf>,
    /// Records carrying the language and partition for each id.
    #[arg(long, required = true)]
    pub records: Vec<PathBuf>,
    /// Language the scores refer to; defaults to each record's own.
    #[arg(long)]
    pub nl: Option<NatLang>,
    #[arg(long, default_value = "0.1..0.9")]
    pub thresholds: String,
    #[arg(long)]
    #[serde(skip)]
    pub output: PathBuf,
    /// Compare against the published Go fine-tuning table within this relative tolerance.
    #[arg(long)]
    pub compare_reference: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 128)]
    pub hidden: usize,
    #[arg(long, default_value_t = 512)]
    pub ffn: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
    pub max_len: usize,
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,
    #[arg(long, default_value_t = DEFAULT_VOCAB_SIZE)]
    pub vocab_size: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long, default_value_t = 0.15)]
    pub mask_rate: f64,
    /// Parallel gradient shards per batch (fixed reduction order).
    #[arg(long, default_value_t = 1)]
    pub shards: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct PretrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub train: TrainArgs,
    /// Record files to draw from (repeatable).
    #[arg(long, required = true)]
    pub input: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "all-to-all")]
    pub regime: RegimeArg,
    /// Programming language for `all-to-one`.
    #[arg(long)]
    pub pl: Option<ProgLang>,
    /// Vocabulary file; trained on the assembled corpus and written here if absent.
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub loss_curve: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegimeArg {
    NoPretraining,
    AllToOne,
    AllToAll,
}

#[derive(Debug, Args, Serialize)]
pub struct FinetuneArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub pairs: PathBuf,
    /// Vocabulary file; trained on the pairs and written here if absent.
    #[arg(long)]
    pub vocab: PathBuf,
    /// Start from this checkpoint instead of a fresh model.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub loss_curve: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerArg {
    /// 1 for the true pair, 0 otherwise.
    Oracle,
    /// Seeded pseudo-random scores.
    Random,
    /// A fine-tuned checkpoint.
    Model,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long)]
    pub test_sets: PathBuf,
    #[arg(long, value_enum, default_value_t = ScorerArg::Model)]
    pub scorer: ScorerArg,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Table row (query language) and column (test corpus) labels.
    #[arg(long, default_value = "en")]
    pub row: String,
    #[arg(long, default_value = "test")]
    pub column: String,
    #[arg(long)]
    #[serde(skip)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub ranks_out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SearchArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long)]
    pub query: String,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub top_k: usize,
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Ingest(a) => &a.common,
            Command::Translate(a) => &a.common,
            Command::Backtranslate(a) => &a.common,
            Command::Filter(a) => &a.common,
            Command::Pretrain(a) => &a.common,
            Command::Finetune(a) => &a.common,
            Command::Evaluate(a) => &a.common,
            Command::Search(a) => &a.common,
            Command::SweepReport(a) => &a.common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Ingest(_) => "ingest",
            Command::Translate(_) => "translate",
            Command::Backtranslate(_) => "backtranslate",
            Command::Filter(_) => "filter",
            Command::Pretrain(_) => "pretrain",
            Command::Finetune(_) => "finetune",
            Command::Evaluate(_) => "evaluate",
            Command::Search(_) => "search",
            Command::SweepReport(_) => "sweep-report",
        }
    }

    fn settings(&self) -> serde_json::Value {
        let v = match self {
            Command::Ingest(a) => serde_json::to_value(a),
            Command::Translate(a) => serde_json::to_value(a),
            Command::Backtranslate(a) => serde_json::to_value(a),
            Command::Filter(a) => serde_json::to_value(a),
            Command::Pretrain(a) => serde_json::to_value(a),
            Command::Finetune(a) => serde_json::to_value(a),
            Command::Evaluate(a) => serde_json::to_value(a),
            Command::Search(a) => serde_json::to_value(a),
            Command::SweepReport(a) => serde_json::to_value(a),
        };
        v.expect("argument structs serialize")
    }
}

/// Everything that determines a run: the subcommand plus every resolved setting.
pub fn resolved_settings(cmd: &Command) -> BTreeMap<String, String> {
    let mut out: BTreeMap<String, String> = match cmd.settings() {
        serde_json::Value::Object(map) => map.into_iter().map(|(k, v)| (k, v.to_string())).collect(),
        _ => BTreeMap::new(),
    };
    out.insert("command".into(), cmd.name().into());
    out
}

/// Parse a `key = value` config file into command-line arguments.
fn config_args(path: &Path) -> Result<Vec<OsString>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut args = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("{}:{}: expected key = value", path.display(), i + 1))?;
        let flag = format!("--{}", k.trim().replace('_', "-"));
        let v = v.trim();
        match v {
            "true" => args.push(flag.into()),
            "false" => {}
            _ => {
                for item in v.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                    args.push(flag.clone().into());
                    args.push(item.into());
                }
            }
        }
    }
    Ok(args)
}

fn find_config(args: &[OsString]) -> Option<PathBuf> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

/// Splice config-file arguments right after the subcommand so explicit flags
/// win. A `--config` given before the subcommand is moved after it.
fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(path) = find_config(&args) else {
        return Ok(args);
    };
    let extra = config_args(&path)?;
    let mut leading = Vec::new();
    let mut i = 1;
    while i < args.len() {
        let s = args[i].to_string_lossy();
        if s == "--config" {
            leading.extend_from_slice(&args[i..(i + 2).min(args.len())]);
            i += 2;
        } else if s.starts_with("--config=") {
            leading.push(args[i].clone());
            i += 1;
        } else if s.starts_with('-') {
            // other top-level flags (--help, --version) need no config
            return Ok(args);
        } else {
            break;
        }
    }
    if i >= args.len() {
        return Ok(args);
    }
    let mut out = vec![args[0].clone(), args[i].clone()];
    out.extend(leading);
    out.extend(extra);
    out.extend_from_slice(&args[i + 1..]);
    Ok(out)
}

/// Run the CLI on `args` (including the program name) and return the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return EXIT_USAGE;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_FAILURE
        }
    }
}

/// Run one parsed subcommand.
pub fn execute(cmd: Command) -> Result<()> {
    let settings = resolved_settings(&cmd);
    let hash = config_hash(settings.iter());
    let seed = cmd.common().seed;
    log::info!("{} config={hash} seed={seed}", cmd.name());
    let header = ArtifactHeader::new(hash, seed);
    match cmd {
        Command::Ingest(a) => ingest(&a, &header),
        Command::Translate(a) => translate(&a, &header),
        Command::Backtranslate(a) => backtranslate(&a, &header),
        Command::Filter(a) => filter(&a, &header),
        Command::Pretrain(a) => pretrain(&a, &header),
        Command::Finetune(a) => finetune(&a, &header),
        Command::Evaluate(a) => evaluate(&a, &header),
        Command::Search(a) => search(&a),
        Command::SweepReport(a) => sweep_report(&a, &header),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn load_records(path: &Path, pl: Option<ProgLang>) -> Result<Vec<CorpusRecord>> {
    let report = load_corpus(path, pl)?;
    if !report.skipped.is_empty() {
        log::warn!("{}: skipped {} invalid lines", path.display(), report.skipped.len());
    }
    Ok(report.records)
}

/// Pair files already carry labels, so they are passed through rather than
/// resampled. Each line also becomes one record (id `<pl>-pair-<index>`).
fn ingest_codesplit(a: &IngestArgs, header: &ArtifactHeader) -> Result<()> {
    let pl = a.pl.ok_or_else(|| anyhow!("--format codesplit needs --pl"))?;
    if a.test_sets_out.is_some() || a.audit.is_some() {
        bail!("--format codesplit supports only --output and --pairs-out");
    }
    let load = corpus::load_codesplit(&a.input, pl, NatLang::En)?;
    println!("records\t{}\nskipped\t{}", load.pairs.len(), load.skipped.len());
    let records: Vec<CorpusRecord> = load
        .pairs
        .iter()
        .filter(|p| p.label == 1)
        .enumerate()
        .map(|(i, p)| CorpusRecord {
            id: format!("{pl}-pair-{i}"),
            docstring: p.query.clone(),
            code: p.code.clone(),
            pl,
            nl: p.nl,
            url: String::new(),
            partition: Partition::Train,
        })
        .collect();
    println!("positives\t{}", records.len());
    write_corpus(&a.output, &records, Some(header))?;
    if let Some(path) = &a.pairs_out {
        write_pairs(path, &load.pairs, Some(header))?;
        println!("pairs\t{}", load.pairs.len());
    }
    Ok(())
}

fn ingest(a: &IngestArgs, header: &ArtifactHeader) -> Result<()> {
    let (records, skipped) = match a.format {
        InputFormat::Records => {
            let r = load_corpus(&a.input, a.pl)?;
            (r.records, r.skipped.len())
        }
        InputFormat::Csn => {
            let file = File::open(&a.input).with_context(|| format!("opening {}", a.input.display()))?;
            let mut records = Vec::new();
            let mut skipped = 0;
            let mut index = 0;
            for line in BufReader::new(file).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match parse_csn_line(&line, index) {
                    Ok(r) if a.pl.is_none_or(|pl| pl == r.pl) => records.push(r),
                    Ok(_) => skipped += 1,
                    Err(e) => {
                        log::debug!("line {}: {e}", index + 1);
                        skipped += 1;
                    }
                }
                index += 1;
            }
            (records, skipped)
        }
        InputFormat::Codesplit => return ingest_codesplit(a, header),
    };
    println!("records\t{}\nskipped\t{skipped}", records.len());
    write_corpus(&a.output, &records, Some(header))?;

    let by_partition = |p: Partition| -> Vec<CorpusRecord> { records.iter().filter(|r| r.partition == p).cloned().collect() };
    if let Some(path) = &a.pairs_out {
        let train = by_partition(Partition::Train);
        let pairs = make_finetune_pairs(&train, a.common.seed)?;
        write_pairs(path, &pairs, Some(header))?;
        println!("pairs\t{}", pairs.len());
        if let Some(n) = a.audit {
            let out = a.audit_out.as_ref().ok_or_else(|| anyhow!("--audit needs --audit-out"))?;
            let sheet = corpus::audit_sample(&pairs, n, a.common.seed)?;
            sheet.write_sheet(create(out)?, Some(header))?;
            sheet.write_answers(create(&out.with_extension("answers.tsv"))?, Some(header))?;
            println!("audit\t{n}");
        }
    } else if a.audit.is_some() {
        bail!("--audit needs --pairs-out");
    }
    if let Some(path) = &a.test_sets_out {
        let test = by_partition(Partition::Test);
        let sets = sample_test_sets(&test, a.k, a.n, a.common.seed)?;
        write_test_sets(path, &sets, Some(header))?;
        println!("test_sets\t{}x{}", sets.len(), a.n);
    }
    Ok(())
}

fn backend(a: &BackendArgs) -> Result<Box<dyn Translator>> {
    Ok(match a.backend.as_str() {
        "mock-reversible" => Box::new(mock::ReversibleMock::new()),
        "mock-lossy" => Box::new(mock::LossyMock::new()),
        url if url.starts_with("http://") || url.starts_with("https://") => {
            Box::new(HttpTranslator::new(url, Duration::from_secs(a.timeout_secs)))
        }
        other => bail!("unknown backend {other:?}; expected mock-reversible, mock-lossy or an http(s) URL"),
    })
}

fn cache(a: &BackendArgs) -> Result<TranslationCache> {
    Ok(match &a.cache {
        Some(p) => TranslationCache::open(p)?,
        None => TranslationCache::in_memory(),
    })
}

fn batch_options(a: &BackendArgs) -> BatchOptions {
    BatchOptions {
        batch_size: a.batch_size,
        max_attempts: a.max_attempts,
        concurrency: a.concurrency,
        ..BatchOptions::default()
    }
}

fn translate(a: &TranslateArgs, header: &ArtifactHeader) -> Result<()> {
    let records = load_records(&a.input, None)?;
    let source = match records.first() {
        Some(r) => r.nl,
        None => bail!("{} holds no records", a.input.display()),
    };
    if let Some(r) = records.iter().find(|r| r.nl != source) {
        bail!("mixed source languages: {} and {}", source, r.nl);
    }
    let backend = backend(&a.backend)?;
    let cache = cache(&a.backend)?;
    for row in translation_coverage_report(&records, &cache, &[a.target], a.backend.beam_size) {
        log::info!("{}->{}: cached {} missing {}", row.source, row.target, row.cached, row.missing);
    }
    let req = TranslationRequest {
        texts: records.iter().map(|r| r.docstring.clone()).collect(),
        source_lang: source,
        target_lang: a.target,
        beam_size: a.backend.beam_size,
    };
    let result = translate_batch(&req, backend.as_ref(), &cache, &batch_options(&a.backend))?;
    let failed = result.failed();
    let outputs = if a.backend.strict {
        result.into_strict()?.into_iter().map(Ok).collect()
    } else {
        result.outputs
    };
    let translated: Vec<CorpusRecord> = records
        .iter()
        .zip(outputs)
        .filter_map(|(r, out)| {
            out.ok().map(|docstring| CorpusRecord { docstring, nl: a.target, ..r.clone() })
        })
        .filter(|r| !r.docstring.trim().is_empty())
        .collect();
    write_corpus(&a.output, &translated, Some(header))?;
    println!("translated\t{}\nfailed\t{failed}", translated.len());
    Ok(())
}

fn backtranslate(a: &BacktranslateArgs, header: &ArtifactHeader) -> Result<()> {
    let records = load_records(&a.input, None)?;
    let backend = backend(&a.backend)?;
    let cache = cache(&a.backend)?;
    let outcome = backtranslate_corpus(
        &records,
        a.pivot,
        backend.as_ref(),
        &cache,
        &batch_options(&a.backend),
        a.backend.beam_size,
    )?;
    if a.backend.strict {
        if let Some((id, e)) = outcome.failed.first() {
            bail!("{} of {} records failed; first {id}: {e}", outcome.failed.len(), records.len());
        }
    }
    write_jsonl(create(&a.output)?, &outcome.triples, Some(header))?;
    println!("triples\t{}\nfailed\t{}", outcome.triples.len(), outcome.failed.len());
    Ok(())
}

fn filter(a: &FilterArgs, header: &ArtifactHeader) -> Result<()> {
    let thresholds = parse_thresholds(&a.thresholds).map_err(|e| anyhow!("--thresholds: {e}"))?;
    let triples: Vec<BackTranslation> = load_jsonl(&a.triples)?;
    let records = load_records(&a.records, None)?;
    let by_id: BTreeMap<&str, &CorpusRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let tok = BleuTokenizer { lowercase: !a.keep_case };
    let mut scored = Vec::with_capacity(triples.len());
    let mut ids = Vec::with_capacity(triples.len());
    for t in &triples {
        let r = by_id
            .get(t.id.as_str())
            .ok_or_else(|| anyhow!("triple {} has no record in {}", t.id, a.records.display()))?;
        let bleu1 = score_backtranslation(t, &tok)?;
        ids.push((t.id.clone(), bleu1));
        scored.push((t.pivot_lang, ScoredRecord {
            record: CorpusRecord { docstring: t.pivot.clone(), nl: t.pivot_lang, ..(*r).clone() },
            bleu1,
        }));
    }
    let report = sweep(scored.iter().map(|(nl, s)| (*nl, s.record.partition, s.bleu1)), &thresholds)?;
    report.write_tsv(create(&a.report)?, Some(header))?;
    report.write_tsv(io::stdout().lock(), None)?;
    if let Some(p) = &a.scores_out {
        write_scores(create(p)?, &ids, Some(header))?;
    }
    match (a.theta, &a.output) {
        (Some(theta), Some(out)) => {
            let only: Vec<ScoredRecord> = scored.into_iter().map(|(_, s)| s).collect();
            let kept = filter_by_threshold(&only, theta)?;
            write_corpus(out, &kept, Some(header))?;
            println!("kept\t{}", kept.len());
        }
        (None, None) => {}
        _ => bail!("--theta and --output go together"),
    }
    Ok(())
}

fn sweep(items: impl Iterator<Item = (NatLang, Partition, f64)>, thresholds: &[f64]) -> Result<FilterReport> {
    let mut groups: BTreeMap<(Partition, NatLang), Vec<f64>> = BTreeMap::new();
    for (nl, split, s) in items {
        groups.entry((split, nl)).or_default().push(s);
    }
    let groups: Vec<SweepGroup> = groups
        .into_iter()
        .map(|((split, nl), scores)| SweepGroup { nl, split, scores })
        .collect();
    Ok(threshold_sweep(&groups, thresholds)?)
}

fn sweep_report(a: &SweepReportArgs, header: &ArtifactHeader) -> Result<()> {
    let thresholds = parse_thresholds(&a.thresholds).map_err(|e| anyhow!("--thresholds: {e}"))?;
    let mut meta: BTreeMap<String, (NatLang, Partition)> = BTreeMap::new();
    for path in &a.records {
        for r in load_records(path, None)? {
            meta.insert(r.id, (a.nl.unwrap_or(r.nl), r.partition));
        }
    }
    println!("records\t{}", meta.len());
    let mut items = Vec::new();
    for path in &a.scores {
        let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
        for (id, s) in read_scores(BufReader::new(file))? {
            let &(nl, split) = meta.get(&id).ok_or_else(|| anyhow!("score for unknown id {id}"))?;
            items.push((nl, split, s));
        }
    }
    let report = sweep(items.into_iter(), &thresholds)?;
    report.write_tsv(create(&a.output)?, Some(header))?;
    report.write_tsv(io::stdout().lock(), None)?;
    if let Some(tol) = a.compare_reference {
        let dev = report.deviations(&reference::go_finetune_report(), tol);
        for d in &dev {
            println!("deviation\t{}\t{}\t{}\tgot {}\twant {}\t{:.4}", d.split, d.nl, d.theta, d.got, d.want, d.rel);
        }
        if !dev.is_empty() {
            bail!("{} cells deviate from the reference table by more than {tol}", dev.len());
        }
        println!("reference\twithin {tol}");
    }
    Ok(())
}

fn encoder_config(m: &ModelArgs, vocab: &Vocabulary, seed: u64) -> EncoderConfig {
    EncoderConfig {
        layers: m.layers,
        heads: m.heads,
        hidden: m.hidden,
        ffn: m.ffn,
        max_len: m.max_len,
        vocab_size: vocab.len(),
        dropout: m.dropout,
        seed,
    }
}

fn train_config(base: TrainConfig, t: &TrainArgs, seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: t.batch_size.unwrap_or(base.batch_size),
        learning_rate: t.lr.unwrap_or(base.learning_rate),
        max_epochs: t.epochs.unwrap_or(base.max_epochs),
        max_steps: t.max_steps,
        mask_rate: t.mask_rate,
        shards: t.shards,
        seed,
        ..base
    }
}

fn load_or_train_vocab(path: &Path, texts: &[&str], size: usize, header: &ArtifactHeader) -> Result<Vocabulary> {
    if path.exists() {
        return Ok(Vocabulary::load(path)?);
    }
    let vocab = Vocabulary::train(texts, size)?;
    vocab.save(path, Some(header))?;
    log::info!("trained vocabulary of {} tokens -> {}", vocab.len(), path.display());
    Ok(vocab)
}

fn pretrain(a: &PretrainArgs, header: &ArtifactHeader) -> Result<()> {
    let mut all = Vec::new();
    for p in &a.input {
        all.extend(load_records(p, None)?);
    }
    let regime = match a.regime {
        RegimeArg::NoPretraining => DataRegime::no_pretraining(),
        RegimeArg::AllToAll => {
            let nls: Vec<NatLang> = all.iter().map(|r| r.nl).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
            let pls: Vec<ProgLang> = all.iter().map(|r| r.pl).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
            DataRegime::new(RegimeKind::AllToAll, nls, pls).unwrap_or_else(|_| DataRegime::all_to_all())
        }
        RegimeArg::AllToOne => {
            let pl = a.pl.ok_or_else(|| anyhow!("--regime all-to-one needs --pl"))?;
            let nls: Vec<NatLang> = all.iter().map(|r| r.nl).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
            DataRegime::new(RegimeKind::AllToOne, nls, vec![pl])?
        }
    };
    let groups = LanguageGroups::from_records(all.iter().cloned());
    let corpus = assemble_pretraining(&groups, &regime)?;
    println!("pretraining_records\t{}", corpus.len());
    let texts: Vec<&str> = all.iter().flat_map(|r| [r.docstring.as_str(), r.code.as_str()]).collect();
    if texts.is_empty() {
        bail!("no input records");
    }
    let vocab = load_or_train_vocab(&a.vocab, &texts, a.model.vocab_size, header)?;
    let mut model = EncoderModel::new(encoder_config(&a.model, &vocab, a.common.seed))?;
    let mut losses = Vec::new();
    if !corpus.is_empty() {
        let encoded: Vec<_> = corpus
            .iter()
            .map(|r| vocab.encode_pair(&r.docstring, &r.code, a.model.max_len))
            .collect();
        let cfg = train_config(TrainConfig::pretrain(), &a.train, a.common.seed);
        let report = pretrain_mlm(&mut model, &encoded, &cfg)?;
        println!("steps\t{}\nskipped\t{}", report.steps, report.skipped);
        if let (Some(first), Some(last)) = (report.losses.first(), report.losses.last()) {
            println!("loss_first\t{first:.6}\nloss_last\t{last:.6}");
        }
        losses = report.losses;
    }
    model.save(&a.checkpoint, Some(header))?;
    if let Some(p) = &a.loss_curve {
        write_loss_curve(create(p)?, &losses, Some(header))?;
    }
    Ok(())
}

fn finetune(a: &FinetuneArgs, header: &ArtifactHeader) -> Result<()> {
    let pairs = corpus::load_pairs(&a.pairs)?;
    if pairs.is_empty() {
        bail!("{} holds no pairs", a.pairs.display());
    }
    let texts: Vec<&str> = pairs.iter().flat_map(|p| [p.query.as_str(), p.code.as_str()]).collect();
    let vocab = load_or_train_vocab(&a.vocab, &texts, a.model.vocab_size, header)?;
    let mut model = match &a.init {
        Some(p) => EncoderModel::load(p)?,
        None => EncoderModel::new(encoder_config(&a.model, &vocab, a.common.seed))?,
    };
    if model.config().vocab_size != vocab.len() {
        bail!("checkpoint expects {} tokens but the vocabulary has {}", model.config().vocab_size, vocab.len());
    }
    let cfg = train_config(TrainConfig::finetune(), &a.train, a.common.seed);
    let report = finetune_pairs(&mut model, &vocab, &pairs, &cfg)?;
    println!("steps\t{}\nepochs\t{}", report.steps, report.epochs);
    if let Some(last) = report.losses.last() {
        println!("loss_last\t{last:.6}");
    }
    model.save(&a.checkpoint, Some(header))?;
    if let Some(p) = &a.loss_curve {
        write_loss_curve(create(p)?, &report.losses, Some(header))?;
    }
    Ok(())
}

fn load_model(checkpoint: Option<&PathBuf>, vocab: Option<&PathBuf>) -> Result<(EncoderModel, Vocabulary)> {
    let c = checkpoint.ok_or_else(|| anyhow!("--scorer model needs --checkpoint"))?;
    let v = vocab.ok_or_else(|| anyhow!("--scorer model needs --vocab"))?;
    Ok((EncoderModel::load(c)?, Vocabulary::load(v)?))
}

fn evaluate(a: &EvaluateArgs, header: &ArtifactHeader) -> Result<()> {
    let sets = load_test_sets(&a.test_sets)?;
    let loaded;
    let oracle;
    let random = RandomScorer { seed: a.common.seed };
    let scorer: &dyn Scorer = match a.scorer {
        ScorerArg::Oracle => {
            oracle = OracleScorer::new(&sets);
            &oracle
        }
        ScorerArg::Random => &random,
        ScorerArg::Model => {
            loaded = load_model(a.checkpoint.as_ref(), a.vocab.as_ref())?;
            &ModelScorer { model: &loaded.0, vocab: &loaded.1 } as &dyn Scorer
        }
    };
    evaluate_with(a, header, &sets, scorer)
}

fn evaluate_with(a: &EvaluateArgs, header: &ArtifactHeader, sets: &[corpus::TestSet], scorer: &dyn Scorer) -> Result<()> {
    let result = mrr_mean(sets, scorer)?;
    for (i, v) in result.per_set.iter().enumerate() {
        println!("set{i}\t{v:.6}");
    }
    println!("MRR {:.3}", result.mean);
    println!("queries_per_set\t{}\ntie_policy\t{}", result.n_queries, result.tie_policy);
    if let Some(p) = &a.output {
        let mut table = MrrTable::default();
        table.set(&a.row, &a.column, result.mean);
        table.write_tsv(create(p)?, Some(header))?;
    }
    if let Some(p) = &a.ranks_out {
        let mut w = create(p)?;
        writeln!(w, "{header}")?;
        for set in sets {
            write_rank_records(&mut w, &rank_records(set, scorer)?)?;
        }
    }
    Ok(())
}

fn search(a: &SearchArgs) -> Result<()> {
    let records = load_records(&a.corpus, None)?;
    let model = EncoderModel::load(&a.checkpoint)?;
    let vocab = Vocabulary::load(&a.vocab)?;
    let codes: Vec<&str> = records.iter().map(|r| r.code.as_str()).collect();
    let hits = top_k(&ModelScorer { model: &model, vocab: &vocab }, &a.query, &codes, a.top_k);
    let mut out = io::stdout().lock();
    writeln!(out, "rank\tscore\tid\tcode")?;
    for (rank, (i, score)) in hits.into_iter().enumerate() {
        let first_line = records[i].code.lines().next().unwrap_or("");
        writeln!(out, "{}\t{:.6}\t{}\t{}", rank + 1, score, records[i].id, first_line)?;
    }
    Ok(())
}
