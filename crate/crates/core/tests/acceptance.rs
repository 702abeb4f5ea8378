//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Real-data checks run only when their inputs are
//! supplied through environment variables and print SKIP otherwise:
//!
//! - `CODESEARCH_GO_FINETUNE`: the CodeSearchNet Go fine-tuning `train.txt`
//!   (`<CODESPLIT>` lines).
//! - `CODESEARCH_GO_SWEEP`: a filter report produced by `filter` or
//!   `sweep-report` from real back-translations.

use std::collections::HashMap;
use std::fs::File;
use std::io::BufReader;
use std::time::{Duration, Instant};

use codesearch::corpus::{
    load_codesplit, make_finetune_pairs, sample_test_sets, NatLang, Partition, ProgLang, TestEntry, TestSet,
};
use codesearch::eval::{mean_reciprocal, mrr, rank_records, RandomScorer};
use codesearch::filtering::{
    reference, score_backtranslation, threshold_sweep, unigram_bleu, BleuTokenizer, FilterReport, SweepGroup,
};
use codesearch::model::{
    grad_check, pretrain_mlm, EncoderConfig, EncoderModel, GradCheckOptions, SeqInput, TrainConfig, TrainExample,
};
use codesearch::rng::SeededRng;
use codesearch::synthetic::{
    docstring_fixture, separable_corpus, separable_pairs, RetrievalExperiment, RetrievalOutcome, SyntheticSpec,
};
use codesearch::tokenizer::{Vocabulary, CLS, SEP};
use codesearch::translation::mock::{LossyMock, ReversibleMock};
use codesearch::translation::{backtranslate_corpus, BatchOptions, TranslationCache, Translator};

const MRR_TOL: f64 = 1e-12;
const RANDOM_MRR_TOL: f64 = 0.005;
const BLEU_TOL: f64 = 1e-9;
const GRAD_TOL_TOY: f64 = 1e-3;
const GRAD_TOL_LINEAR: f64 = 1e-6;
const MLM_RATIO: f64 = 0.7;
const MLM_INIT_TOL: f64 = 0.2;
const FINETUNE_MRR: f64 = 0.7;
const FINETUNE_ACCURACY: f64 = 0.95;
const REAL_GO_RECORDS: usize = 635_652;
const REAL_SWEEP_TOL: f64 = 0.01;

enum Verdict {
    Pass,
    Fail,
    Skip,
}

struct Suite {
    failures: usize,
}

impl Suite {
    fn report(&mut self, name: &str, verdict: Verdict, detail: String, elapsed: Duration) {
        let tag = match verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => {
                self.failures += 1;
                "FAIL"
            }
            Verdict::Skip => "SKIP",
        };
        println!("{tag}  {name}: {detail} [{:.1}s]", elapsed.as_secs_f64());
    }

    fn check(&mut self, name: &str, budget: Option<Duration>, f: impl FnOnce() -> (bool, String)) {
        let start = Instant::now();
        let (ok, mut detail) = f();
        let elapsed = start.elapsed();
        let in_time = budget.is_none_or(|b| elapsed <= b);
        if !in_time {
            detail.push_str(&format!("; over the {}s budget", budget.unwrap().as_secs()));
        }
        let verdict = if ok && in_time { Verdict::Pass } else { Verdict::Fail };
        self.report(name, verdict, detail, elapsed);
    }
}

fn numbered_set(n: usize) -> TestSet {
    TestSet {
        entries: (0..n).map(|i| TestEntry { id: format!("e{i}"), query: format!("q{i}"), code: format!("c{i}") }).collect(),
        seed: 0,
    }
}

fn index_of(s: &str) -> usize {
    s[1..].parse().unwrap()
}

/// Position of the true code after a full descending sort in which ties are
/// broken in the true code's favour.
fn brute_force_rank(scores: &[f64], truth: usize) -> usize {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then((a != truth).cmp(&(b != truth))));
    order.iter().position(|&i| i == truth).unwrap() + 1
}

fn mrr_oracle_equivalence() -> (bool, String) {
    let mut rng = SeededRng::new(2024);
    let mut worst = 0.0f64;
    let mut rank_mismatches = 0;
    for _ in 0..20 {
        let n = 1 + rng.below(50);
        // few distinct levels so ties are common
        let levels = 1 + rng.below(6);
        let table: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.below(levels) as f64).collect()).collect();
        let set = numbered_set(n);
        let scorer = |q: &str, c: &str| table[index_of(q)][index_of(c)];
        let got = rank_records(&set, &scorer).unwrap();
        let oracle: Vec<usize> = (0..n).map(|q| brute_force_rank(&table[q], q)).collect();
        rank_mismatches += got.iter().zip(&oracle).filter(|(g, o)| g.rank != **o).count();
        let oracle_mrr = oracle.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n as f64;
        worst = worst.max((mrr(&set, &scorer).unwrap().mean - oracle_mrr).abs());
    }
    (rank_mismatches == 0 && worst <= MRR_TOL, format!("20 sets, rank mismatches {rank_mismatches}, max |dMRR| {worst:.1e}"))
}

fn mrr_hand_value() -> (bool, String) {
    // queries 0..3 of a 4-entry set are forced to ranks 1, 2 and 4
    let want = [1usize, 2, 4];
    let set = numbered_set(4);
    let scorer = |q: &str, c: &str| {
        let (q, c) = (index_of(q), index_of(c));
        if q >= 3 || q == c {
            return 1.0;
        }
        let beaten_by: Vec<usize> = (0..4).filter(|&j| j != q).take(want[q] - 1).collect();
        if beaten_by.contains(&c) {
            2.0
        } else {
            0.0
        }
    };
    let ranks = rank_records(&set, &scorer).unwrap();
    let got: Vec<usize> = ranks.iter().take(3).map(|r| r.rank).collect();
    let value = mean_reciprocal(&ranks[..3]);
    let expected = 7.0 / 12.0;
    (got == want && (value - expected).abs() <= MRR_TOL, format!("ranks {got:?}, MRR {value:.15} vs 7/12"))
}

fn random_scorer_expectation() -> (bool, String) {
    let n = 100;
    let set = numbered_set(n);
    let trials = 1000;
    let mean = (0..trials).map(|seed| mrr(&set, &RandomScorer { seed }).unwrap().mean).sum::<f64>() / trials as f64;
    let harmonic = (1..=n).map(|k| 1.0 / k as f64).sum::<f64>() / n as f64;
    (
        (mean - harmonic).abs() <= RANDOM_MRR_TOL,
        format!("empirical {mean:.5} vs H_100/100 = {harmonic:.5} (tol {RANDOM_MRR_TOL})"),
    )
}

fn bleu(c: &str, r: &str) -> f64 {
    let toks = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
    unigram_bleu(&toks(c), &toks(r)).unwrap()
}

fn bleu_correctness() -> (bool, String) {
    let identity = bleu("get the user name", "get the user name");
    let disjoint = bleu("alpha beta", "gamma delta");
    let bp = bleu("the cat sat", "the cat sat down");
    let clipped = bleu("the the the the", "the cat");
    let bp_expected = (1.0f64 - 4.0 / 3.0).exp();
    let ok = (identity - 1.0).abs() <= BLEU_TOL
        && disjoint.abs() <= BLEU_TOL
        && (bp - bp_expected).abs() <= BLEU_TOL
        && (bp - 0.716531).abs() < 5e-7
        && (clipped - 0.25).abs() <= BLEU_TOL;
    (ok, format!("identity {identity}, disjoint {disjoint}, brevity {bp:.9}, clipped {clipped}"))
}

/// Independent model of the lossy round trip: each leg drops every 5th token.
fn lossy_oracle_score(text: &str) -> f64 {
    let reference: Vec<String> = text.split_whitespace().map(str::to_lowercase).collect();
    let mut cand = reference.clone();
    for _ in 0..2 {
        cand = cand.into_iter().enumerate().filter(|(i, _)| (i + 1) % 5 != 0).map(|(_, t)| t).collect();
    }
    if cand.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &reference {
        *counts.entry(t).or_default() += 1;
    }
    let hits = cand
        .iter()
        .filter(|t| match counts.get_mut(t.as_str()) {
            Some(n) if *n > 0 => {
                *n -= 1;
                true
            }
            _ => false,
        })
        .count();
    let (c, r) = (cand.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * hits as f64 / c
}

fn sweep_counts(backend: &dyn Translator, thresholds: &[f64]) -> (Vec<usize>, Vec<f64>) {
    let records = docstring_fixture(100, 0);
    let bt = backtranslate_corpus(
        &records,
        NatLang::Fr,
        backend,
        &TranslationCache::in_memory(),
        &BatchOptions::default(),
        3,
    )
    .unwrap();
    assert_eq!(bt.triples.len(), 100);
    let tok = BleuTokenizer::default();
    let scores: Vec<f64> = bt.triples.iter().map(|t| score_backtranslation(t, &tok).unwrap()).collect();
    let group = SweepGroup { nl: NatLang::Fr, split: Partition::Train, scores: scores.clone() };
    let report = threshold_sweep(&[group], thresholds).unwrap();
    (report.rows[0].retained.clone(), scores)
}

fn filtering_monotone_and_strict() -> (bool, String) {
    let thresholds: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
    let (lossy, _) = sweep_counts(&LossyMock::new(), &thresholds);
    let texts = docstring_fixture(100, 0);
    let oracle: Vec<usize> = thresholds
        .iter()
        .map(|&t| texts.iter().filter(|r| lossy_oracle_score(&r.docstring) > t).count())
        .collect();
    let monotone = lossy.windows(2).all(|w| w[0] >= w[1]);
    let mut below_one = thresholds.clone();
    below_one.push(0.999);
    let (reversible, scores) = sweep_counts(&ReversibleMock::new(), &below_one);
    let all_kept = reversible.iter().all(|&c| c == 100) && scores.iter().all(|&s| s == 1.0);
    (
        monotone && lossy == oracle && all_kept,
        format!("lossy {lossy:?} (oracle {oracle:?}), reversible all retained: {all_kept}"),
    )
}

fn grad_batch(vocab: usize, seed: u64) -> Vec<TrainExample> {
    let mut rng = SeededRng::new(seed);
    [11usize, 7, 16, 9]
        .iter()
        .enumerate()
        .map(|(i, &len)| {
            let mut ids = vec![CLS];
            ids.extend((2..len).map(|_| 5 + rng.below(vocab - 5) as u32));
            ids.push(SEP);
            let mut input = SeqInput::new(ids);
            if i == 2 {
                // padded tail
                for j in 12..len {
                    input.ids[j] = 0;
                    input.mask[j] = false;
                }
            }
            TrainExample {
                input,
                mlm_targets: vec![(1, 5 + rng.below(vocab - 5) as u32), (len / 2, 5 + rng.below(vocab - 5) as u32)],
                label: Some((i % 2) as f64),
            }
        })
        .collect()
}

fn gradient_check() -> (bool, String) {
    let vocab = 300;
    let toy = EncoderModel::new(EncoderConfig { dropout: 0.0, ..EncoderConfig::toy(vocab) }).unwrap();
    let linear = EncoderModel::new(EncoderConfig { layers: 0, dropout: 0.0, ..EncoderConfig::toy(vocab) }).unwrap();
    let opts = GradCheckOptions::default();
    let a = grad_check(&toy, &grad_batch(vocab, 1), &opts).unwrap();
    let b = grad_check(&linear, &grad_batch(vocab, 2), &opts).unwrap();
    let coords = a.checks.len().min(b.checks.len());
    (
        toy.num_params() <= 100_000 && coords >= 200 && a.passes(GRAD_TOL_TOY) && b.passes(GRAD_TOL_LINEAR),
        format!(
            "toy ({} params) {:.2e} < {GRAD_TOL_TOY:e}; 0-layer {:.2e} < {GRAD_TOL_LINEAR:e}; {} coords each",
            toy.num_params(),
            a.max_rel_error,
            b.max_rel_error,
            coords
        ),
    )
}

fn mlm_signal() -> (bool, String) {
    let records = separable_corpus(&SyntheticSpec { records: 500, ..Default::default() });
    let texts: Vec<&str> = records.iter().flat_map(|r| [r.docstring.as_str(), r.code.as_str()]).collect();
    let vocab = Vocabulary::train(&texts, 512).unwrap();
    let cfg = EncoderConfig::toy(vocab.len());
    let corpus: Vec<_> = records.iter().map(|r| vocab.encode_pair(&r.docstring, &r.code, cfg.max_len)).collect();
    let mut model = EncoderModel::new(cfg).unwrap();
    let train = TrainConfig {
        batch_size: 32,
        learning_rate: 1e-3,
        max_epochs: usize::MAX,
        max_steps: Some(200),
        ..TrainConfig::pretrain()
    };
    let report = pretrain_mlm(&mut model, &corpus, &train).unwrap();
    let first = report.losses[0];
    let tail = &report.losses[report.losses.len() - 10..];
    let last = tail.iter().sum::<f64>() / tail.len() as f64;
    let ln_v = (vocab.len() as f64).ln();
    let finite = model.params().iter().all(|p| p.is_finite());
    (
        report.steps == 200 && finite && last < MLM_RATIO * first && ((first - ln_v) / ln_v).abs() <= MLM_INIT_TOL,
        format!(
            "{} steps, loss {first:.3} -> {last:.3} (ratio {:.3} < {MLM_RATIO}); ln V = {ln_v:.3}",
            report.steps,
            last / first
        ),
    )
}

fn finetune_retrieval(out: &RetrievalOutcome, exp: &RetrievalExperiment) -> (bool, String) {
    let baseline = (1..=exp.test_records).map(|k| 1.0 / k as f64).sum::<f64>() / exp.test_records as f64;
    (
        out.mrr.n_queries == 100 && out.mrr.mean >= FINETUNE_MRR,
        format!("MRR {:.4} on n = {} (random {baseline:.4})", out.mrr.mean, out.mrr.n_queries),
    )
}

fn finetune_heldout(out: &RetrievalOutcome, exp: &RetrievalExperiment) -> (bool, String) {
    let held = separable_corpus(&SyntheticSpec { records: 750, partition: Partition::Valid, ..exp.train.clone() });
    let pairs = separable_pairs(&held, 11);
    let scored: Vec<(&str, &str)> = pairs.iter().map(|p| (p.query.as_str(), p.code.as_str())).collect();
    let scores = out.model.score_pairs(&out.vocab, &scored);
    let correct = pairs.iter().zip(&scores).filter(|(p, &s)| (s > 0.5) == (p.label == 1)).count();
    let accuracy = correct as f64 / pairs.len() as f64;
    let mean = |label: u8| {
        let v: Vec<f64> = pairs.iter().zip(&scores).filter(|(p, _)| p.label == label).map(|(_, &s)| s).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (pos, neg) = (mean(1), mean(0));
    (
        accuracy >= FINETUNE_ACCURACY && pos > neg,
        format!("accuracy {accuracy:.4} on {} held-out pairs; mean score + {pos:.3} / - {neg:.3}", pairs.len()),
    )
}

fn balance_and_protocol() -> (bool, String) {
    let mut balanced = true;
    for seed in 0..5 {
        let recs = separable_corpus(&SyntheticSpec { records: 200 + 37 * seed as usize, seed, ..Default::default() });
        let pairs = make_finetune_pairs(&recs, seed).unwrap();
        balanced &= 2 * pairs.iter().filter(|p| p.label == 1).count() == pairs.len();
    }
    let pool = separable_corpus(&SyntheticSpec { records: 2500, pool_size: 2000, partition: Partition::Test, ..Default::default() });
    let sets = sample_test_sets(&pool, 3, 1000, 7).unwrap();
    let sizes: Vec<usize> = sets.iter().map(|s| s.size()).collect();
    let distinct = sets.iter().all(|s| s.entries.iter().map(|e| &e.code).collect::<std::collections::HashSet<_>>().len() == 1000);
    (
        balanced && sizes == [1000, 1000, 1000] && distinct,
        format!("pairs exactly 50% positive: {balanced}; test set sizes {sizes:?}, codes distinct: {distinct}"),
    )
}

fn main() {
    let mut suite = Suite { failures: 0 };
    suite.check("MRR oracle equivalence", Some(Duration::from_secs(10)), mrr_oracle_equivalence);
    suite.check("MRR hand value", None, mrr_hand_value);
    suite.check("random-scorer expectation", Some(Duration::from_secs(30)), random_scorer_expectation);
    suite.check("BLEU correctness", None, bleu_correctness);
    suite.check("filtering monotonicity and strictness", None, filtering_monotone_and_strict);
    suite.check("gradient check", Some(Duration::from_secs(120)), gradient_check);
    suite.check("MLM training signal", Some(Duration::from_secs(300)), mlm_signal);

    let exp = RetrievalExperiment::default();
    let start = Instant::now();
    let first = exp.run().expect("retrieval experiment");
    let elapsed = start.elapsed();
    let (ok, detail) = finetune_retrieval(&first, &exp);
    let in_time = elapsed <= Duration::from_secs(600);
    suite.report(
        "fine-tune/retrieval end to end",
        if ok && in_time { Verdict::Pass } else { Verdict::Fail },
        detail,
        elapsed,
    );
    suite.check("fine-tune held-out accuracy", None, || finetune_heldout(&first, &exp));
    suite.check("determinism", None, || {
        let second = exp.run().expect("retrieval experiment");
        let same = first.mrr.mean.to_bits() == second.mrr.mean.to_bits()
            && first.model.params() == second.model.params()
            && first.pretrain.losses == second.pretrain.losses
            && first.finetune.losses == second.finetune.losses;
        (same, format!("rerun MRR {:.17} vs {:.17}, identical parameters and loss curves: {same}", second.mrr.mean, first.mrr.mean))
    });
    suite.check("balance and protocol", None, balance_and_protocol);

    match std::env::var_os("CODESEARCH_GO_FINETUNE") {
        Some(path) => suite.check("real CSN Go fine-tuning size", None, || {
            let load = load_codesplit(path.as_ref(), ProgLang::Go, NatLang::En).unwrap();
            (load.pairs.len() == REAL_GO_RECORDS, format!("{} records, expected {REAL_GO_RECORDS}", load.pairs.len()))
        }),
        None => suite.report(
            "real CSN Go fine-tuning size",
            Verdict::Skip,
            "set CODESEARCH_GO_FINETUNE to the Go train.txt".into(),
            Duration::ZERO,
        ),
    }
    match std::env::var_os("CODESEARCH_GO_SWEEP") {
        Some(path) => suite.check("real back-translation filter counts", None, || {
            let report = FilterReport::read_tsv(BufReader::new(File::open(path).unwrap())).unwrap();
            let table = reference::go_finetune_report();
            let devs = report.deviations(&table, REAL_SWEEP_TOL);
            let compared = report.rows.len();
            (compared > 0 && devs.is_empty(), format!("{compared} rows compared, {} cells off by more than 1%", devs.len()))
        }),
        None => suite.report(
            "real back-translation filter counts",
            Verdict::Skip,
            "set CODESEARCH_GO_SWEEP to a filter report built from real back-translations".into(),
            Duration::ZERO,
        ),
    }

    if suite.failures > 0 {
        println!("{} acceptance criteria failed", suite.failures);
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
