//! Load a JSONL corpus, build balanced fine-tuning pairs and sample
//! distractor-pool test sets.

use std::io::Write;

use codesearch::corpus::{load_corpus, make_finetune_pairs, sample_test_sets, write_corpus, ProgLang};
use codesearch::synthetic::{separable_corpus, SyntheticSpec};

fn main() -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("go.jsonl");
    write_corpus(&path, &separable_corpus(&SyntheticSpec { records: 40, ..Default::default() }), None)?;
    // one malformed and one empty-docstring line are skipped, not fatal
    let mut f = std::fs::OpenOptions::new().append(true).open(&path)?;
    writeln!(f, "{{not json")?;
    writeln!(f, r#"{{"id":"x","docstring":" ","code":"func x() {{}}","pl":"go","nl":"en","partition":"train"}}"#)?;
    drop(f);

    let report = load_corpus(&path, Some(ProgLang::Go))?;
    println!("loaded {} records, skipped {}", report.records.len(), report.skipped.len());
    for s in &report.skipped {
        println!("  line {}: {:?}", s.line, s.reason);
    }

    let pairs = make_finetune_pairs(&report.records, 0)?;
    let positives = pairs.iter().filter(|p| p.label == 1).count();
    println!("pairs {} positives {}", pairs.len(), positives);
    println!("  + {:?} / {:?}", pairs[0].query, pairs[0].code);
    println!("  - {:?} / {:?}", pairs[1].query, pairs[1].code);

    let sets = sample_test_sets(&report.records, 3, 10, 0)?;
    for (i, s) in sets.iter().enumerate() {
        println!("test set {i}: {} entries, first {}", s.size(), s.entries[0].id);
    }
    Ok(())
}
