//! Mean reciprocal rank over distractor pools with reference scorers.

use codesearch::corpus::TestSet;
use codesearch::eval::{mrr, mrr_mean, random_mrr_expectation, rank_records, OracleScorer, RandomScorer};
use codesearch::synthetic::{separable_corpus, SyntheticSpec};

fn main() -> anyhow::Result<()> {
    let set = TestSet::from_records(&separable_corpus(&SyntheticSpec { records: 100, ..Default::default() }))?;

    let oracle = OracleScorer::new([&set]);
    println!("oracle MRR {:.3}", mrr(&set, &oracle)?.mean);

    let random: Vec<f64> = (0..200).map(|seed| mrr(&set, &RandomScorer { seed }).map(|r| r.mean)).collect::<Result<_, _>>()?;
    let mean = random.iter().sum::<f64>() / random.len() as f64;
    println!("random MRR over 200 seeds {mean:.4} (expected {:.4})", random_mrr_expectation(set.size()));

    // a scorer that only counts shared words ranks by overlap
    let overlap = |q: &str, c: &str| codesearch::synthetic::shared_tokens(q, c) as f64;
    let ranks = rank_records(&set, &overlap)?;
    println!("word-overlap scorer: first ranks {:?}", ranks.iter().take(5).map(|r| r.rank).collect::<Vec<_>>());
    println!("word-overlap MRR {:.3}", mrr_mean(std::slice::from_ref(&set), &overlap)?.mean);
    Ok(())
}
