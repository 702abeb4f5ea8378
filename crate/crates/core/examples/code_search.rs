//! Train a small cross-encoder on synthetic data, then answer a query by
//! scoring every code in a corpus. Pass `quick` for a smaller, weaker model.

use codesearch::corpus::Partition;
use codesearch::eval::{top_k, ModelScorer};
use codesearch::synthetic::{separable_corpus, RetrievalExperiment, SyntheticSpec};

fn main() -> anyhow::Result<()> {
    let exp = match std::env::args().nth(1).as_deref() {
        Some("quick") => RetrievalExperiment::quick(),
        _ => RetrievalExperiment::default(),
    };
    let out = exp.run()?;
    let corpus = separable_corpus(&SyntheticSpec { records: 20, seed: exp.train.seed, partition: Partition::Test, ..Default::default() });
    let codes: Vec<&str> = corpus.iter().map(|r| r.code.as_str()).collect();
    let query = &corpus[3].docstring;
    println!("query: {query}");
    for (rank, (i, score)) in top_k(&ModelScorer { model: &out.model, vocab: &out.vocab }, query, &codes, 5)
        .into_iter()
        .enumerate()
    {
        println!("{}\t{score:.4}\t{}", rank + 1, corpus[i].code);
    }
    Ok(())
}
