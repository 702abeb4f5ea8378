//! Train a byte-level BPE vocabulary and encode a query/code pair.

use codesearch::synthetic::{separable_corpus, SyntheticSpec};
use codesearch::tokenizer::Vocabulary;

fn main() -> anyhow::Result<()> {
    let records = separable_corpus(&SyntheticSpec { records: 200, ..Default::default() });
    let texts: Vec<&str> = records.iter().flat_map(|r| [r.docstring.as_str(), r.code.as_str()]).collect();
    let vocab = Vocabulary::train(&texts, 400)?;
    println!("vocab {} tokens, {} merges", vocab.len(), vocab.merges().len());

    let r = &records[0];
    let enc = vocab.encode_pair(&r.docstring, &r.code, 32);
    let pieces: Vec<String> = enc.ids.iter().map(|&id| vocab.token_str(id).unwrap_or_default()).collect();
    println!("{} / {}", r.docstring, r.code);
    println!("ids    {:?}", enc.ids);
    println!("pieces {pieces:?}");
    println!("segments {:?}", vocab.decode_segments(&enc.ids)?);
    // bytes never seen in training still round-trip
    let text = "héllo, 世界";
    assert_eq!(vocab.decode(&vocab.tokenize(text))?, text);
    println!("{text:?} -> {} tokens", vocab.tokenize(text).len());
    Ok(())
}
