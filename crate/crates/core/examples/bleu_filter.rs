//! Score lossy back-translations with uni-gram BLEU and sweep thresholds.

use codesearch::corpus::{NatLang, Partition};
use codesearch::filtering::{
    filter_by_threshold, score_backtranslation, threshold_sweep, unigram_bleu, BleuTokenizer, ScoredRecord,
    SweepGroup,
};
use codesearch::synthetic::docstring_fixture;
use codesearch::translation::mock::LossyMock;
use codesearch::translation::{backtranslate_corpus, BatchOptions, TranslationCache, DEFAULT_BEAM_SIZE};

fn main() -> anyhow::Result<()> {
    let short: Vec<&str> = "the cat sat".split(' ').collect();
    let long: Vec<&str> = "the cat sat down".split(' ').collect();
    println!("bleu1(short, long) = {:.6}", unigram_bleu(&short, &long)?);
    println!("bleu1(long, short) = {:.6}", unigram_bleu(&long, &short)?);

    let records = docstring_fixture(100, 0);
    let bt = backtranslate_corpus(
        &records,
        NatLang::Fr,
        &LossyMock::new(),
        &TranslationCache::in_memory(),
        &BatchOptions::default(),
        DEFAULT_BEAM_SIZE,
    )?;
    let tok = BleuTokenizer::default();
    let scored = records
        .iter()
        .zip(&bt.triples)
        .map(|(r, t)| Ok(ScoredRecord { record: r.clone(), bleu1: score_backtranslation(t, &tok)? }))
        .collect::<anyhow::Result<Vec<_>>>()?;

    let kept = filter_by_threshold(&scored, 0.5)?;
    println!("theta 0.5 keeps {} of {}", kept.len(), scored.len());

    let group = SweepGroup { nl: NatLang::Fr, split: Partition::Train, scores: scored.iter().map(|s| s.bleu1).collect() };
    let thresholds: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
    let report = threshold_sweep(&[group], &thresholds)?;
    report.write_tsv(std::io::stdout().lock(), None)?;
    Ok(())
}
