//! Pretrain, fine-tune and rank on the separable synthetic corpus.
//!
//! `cargo run --example synthetic_retrieval` runs the full configuration
//! (about a minute and a half on one core); pass `quick` for a smoke run.

use codesearch::eval::random_mrr_expectation;
use codesearch::synthetic::RetrievalExperiment;

fn main() -> anyhow::Result<()> {
    let exp = match std::env::args().nth(1).as_deref() {
        Some("quick") => RetrievalExperiment::quick(),
        _ => RetrievalExperiment::default(),
    };
    let out = exp.run()?;
    let p = &out.pretrain.losses;
    let tail = &p[p.len().saturating_sub(10)..];
    println!("vocab {} params {}", out.vocab.len(), out.model.num_params());
    println!("pretrain steps {} loss {:.3} -> {:.3}", out.pretrain.steps, p[0], tail.iter().sum::<f64>() / tail.len() as f64);
    let f = &out.finetune.losses;
    println!("finetune steps {} loss {:.3} -> {:.3}", out.finetune.steps, f[0], f[f.len() - 1]);
    println!(
        "MRR {:.3} over {} queries (random baseline {:.3})",
        out.mrr.mean,
        out.mrr.n_queries,
        random_mrr_expectation(exp.test_records)
    );
    Ok(())
}
