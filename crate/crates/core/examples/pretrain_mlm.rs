//! Masked-language-model pretraining of the toy encoder on 500 synthetic
//! docstring/code sequences.

use codesearch::model::{pretrain_mlm, EncoderConfig, EncoderModel, TrainConfig};
use codesearch::synthetic::{separable_corpus, SyntheticSpec};
use codesearch::tokenizer::Vocabulary;

fn main() -> anyhow::Result<()> {
    let records = separable_corpus(&SyntheticSpec { records: 500, ..Default::default() });
    let texts: Vec<&str> = records.iter().flat_map(|r| [r.docstring.as_str(), r.code.as_str()]).collect();
    let vocab = Vocabulary::train(&texts, 512)?;
    let cfg = EncoderConfig::toy(vocab.len());
    let corpus: Vec<_> = records.iter().map(|r| vocab.encode_pair(&r.docstring, &r.code, cfg.max_len)).collect();
    let mut model = EncoderModel::new(cfg)?;
    let train = TrainConfig {
        batch_size: 32,
        learning_rate: 1e-3,
        max_epochs: 100,
        max_steps: Some(200),
        ..TrainConfig::pretrain()
    };
    let report = pretrain_mlm(&mut model, &corpus, &train)?;
    let l = &report.losses;
    for (step, loss) in l.iter().enumerate().step_by(20) {
        println!("step {step:>3}  loss {loss:.3}");
    }
    let tail = &l[l.len() - 10..];
    println!(
        "vocab {}  ln(V) {:.3}  first {:.3}  last-10 mean {:.3}",
        vocab.len(),
        (vocab.len() as f64).ln(),
        l[0],
        tail.iter().sum::<f64>() / 10.0
    );
    Ok(())
}
