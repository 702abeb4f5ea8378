//! Round-trip docstrings through a pivot language with the offline mock
//! backends, with a translation cache in front of them.

use codesearch::corpus::NatLang;
use codesearch::synthetic::docstring_fixture;
use codesearch::translation::mock::{LossyMock, ReversibleMock};
use codesearch::translation::{backtranslate_corpus, BatchOptions, TranslationCache, DEFAULT_BEAM_SIZE};

fn main() -> anyhow::Result<()> {
    let records = docstring_fixture(5, 0);
    let opts = BatchOptions::default();

    let reversible = ReversibleMock::new();
    let cache = TranslationCache::in_memory();
    let out = backtranslate_corpus(&records, NatLang::Fr, &reversible, &cache, &opts, DEFAULT_BEAM_SIZE)?;
    for t in &out.triples {
        println!("{}\n  pivot {}\n  back  {}", t.original, t.pivot, t.round_trip);
    }
    let calls = reversible.calls();
    backtranslate_corpus(&records, NatLang::Fr, &reversible, &cache, &opts, DEFAULT_BEAM_SIZE)?;
    println!("backend calls: {calls} first run, {} after a cached rerun", reversible.calls());

    let lossy = LossyMock::new();
    let out = backtranslate_corpus(&records, NatLang::Ja, &lossy, &TranslationCache::in_memory(), &opts, DEFAULT_BEAM_SIZE)?;
    println!("lossy round trips:");
    for t in &out.triples {
        println!("  {} -> {}", t.original, t.round_trip);
    }
    Ok(())
}
