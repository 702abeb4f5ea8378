//! Compare the encoder's analytic gradient with central finite differences.

use codesearch::model::{grad_check, EncoderConfig, EncoderModel, GradCheckOptions, SeqInput, TrainExample};
use codesearch::rng::SeededRng;
use codesearch::tokenizer::{CLS, SEP};

fn batch(vocab: usize) -> Vec<TrainExample> {
    let mut rng = SeededRng::new(0);
    [9usize, 6, 12]
        .iter()
        .enumerate()
        .map(|(i, &len)| {
            let mut ids = vec![CLS];
            ids.extend((2..len).map(|_| 5 + rng.below(vocab - 5) as u32));
            ids.push(SEP);
            TrainExample {
                input: SeqInput::new(ids),
                mlm_targets: vec![(1, 7), (len - 2, 42)],
                label: Some((i % 2) as f64),
            }
        })
        .collect()
}

fn main() -> anyhow::Result<()> {
    for layers in [0, 2] {
        let cfg = EncoderConfig { layers, dropout: 0.0, ..EncoderConfig::toy(300) };
        let model = EncoderModel::new(cfg)?;
        let report = grad_check(&model, &batch(300), &GradCheckOptions::default())?;
        let worst = report.worst().expect("coordinates were probed");
        println!(
            "layers {layers}: {} params, {} coords, max rel error {:.2e} at {}[{}] (analytic {:.3e}, numeric {:.3e})",
            model.num_params(),
            report.checks.len(),
            report.max_rel_error,
            worst.tensor,
            worst.index,
            worst.analytic,
            worst.numeric
        );
    }
    Ok(())
}
